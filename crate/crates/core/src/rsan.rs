//! Recursive one-source-at-a-time separation of a single block.
//!
//! Each iteration asks a [`MaskEstimator`] for a speaker mask, a noise mask
//! and a stop flag given the mixture and the current residual mask. The
//! residual starts from the caller-supplied initial mask (all ones for an
//! independent block) and is reduced by the estimated masks after every
//! accepted iteration, with negative values clamped to zero.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::estimators::MaskEstimator;
use crate::spectral::{MagnitudeSpectrogram, Mask};

/// T×F matrix in `[0, 1]` marking the parts of the mixture not yet
/// attributed to an extracted source.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMask(Array2<f64>);

impl ResidualMask {
    pub fn ones(frames: usize, bins: usize) -> Self {
        Self(Array2::ones((frames, bins)))
    }

    pub fn new(data: Array2<f64>) -> Result<Self> {
        Mask::new(data).map(|m| Self(m.into_inner()))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// Which estimated masks are removed from the residual after an iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtractionPolicy {
    #[default]
    SpeakerAndNoise,
    SpeakerOnly,
}

/// Per-iteration stop thresholds. Iteration `i` (zero-based) uses
/// `thresholds[min(i, len - 1)]`, so `[0.6, 0.1]` means 0.6 first and 0.1
/// for every later iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StopPolicy {
    thresholds: Vec<f64>,
    max_iterations: usize,
}

impl Default for StopPolicy {
    fn default() -> Self {
        Self {
            thresholds: vec![0.6],
            max_iterations: 4,
        }
    }
}

impl StopPolicy {
    pub fn new(thresholds: Vec<f64>, max_iterations: usize) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::param("thresholds", "at least one threshold is required"));
        }
        if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::param("thresholds", format!("{t} is outside (0, 1)")));
        }
        if max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        Ok(Self {
            thresholds,
            max_iterations,
        })
    }

    pub fn threshold(&self, iteration: usize) -> f64 {
        self.thresholds[iteration.min(self.thresholds.len() - 1)]
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn max_iterations(&self) -> usize {
        self.max_iterations
    }

    /// Strict comparison: a flag equal to the threshold keeps recursing.
    pub fn should_stop(&self, iteration: usize, flag: f64) -> bool {
        flag > self.threshold(iteration)
    }
}

/// One estimator call: the extracted speaker, the remaining noise and the
/// stop flag.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationResult {
    pub speaker_mask: Mask,
    pub noise_mask: Mask,
    pub stop_flag: f64,
    /// Ground-truth source index, when the estimator knows it.
    pub source: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockResult {
    /// One mask per accepted iteration, in extraction order.
    pub speaker_masks: Vec<Mask>,
    /// Clamped sum of the accepted iterations' noise masks.
    pub noise_mask: Mask,
    /// Flags of the accepted iterations.
    pub flags: Vec<f64>,
    /// The flag that ended the recursion, if it was not the iteration cap.
    pub stop_flag: Option<f64>,
    pub sources: Vec<Option<usize>>,
    /// Initial residual followed by the residual after each accepted iteration.
    pub residual_trace: Option<Vec<ResidualMask>>,
}

impl BlockResult {
    pub fn iteration_count(&self) -> usize {
        self.speaker_masks.len()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecursionOptions {
    pub subtraction: SubtractionPolicy,
    pub record_residuals: bool,
}

pub fn update_residual(
    residual: &ResidualMask,
    iteration: &IterationResult,
    policy: SubtractionPolicy,
) -> Result<ResidualMask> {
    check_shape("update_residual", residual.shape(), iteration.speaker_mask.shape())?;
    check_shape("update_residual", residual.shape(), iteration.noise_mask.shape())?;
    let mut next = residual.0.clone();
    match policy {
        SubtractionPolicy::SpeakerAndNoise => Zip::from(&mut next)
            .and(iteration.speaker_mask.data())
            .and(iteration.noise_mask.data())
            .for_each(|r, &s, &n| *r = (*r - s - n).clamp(0.0, 1.0)),
        SubtractionPolicy::SpeakerOnly => Zip::from(&mut next)
            .and(iteration.speaker_mask.data())
            .for_each(|r, &s| *r = (*r - s).clamp(0.0, 1.0)),
    }
    Ok(ResidualMask(next))
}

fn check_iteration(shape: (usize, usize), it: &IterationResult) -> Result<()> {
    if it.speaker_mask.shape() != shape || it.noise_mask.shape() != shape {
        return Err(Error::ContractViolation(format!(
            "estimator returned masks of shape {:?}/{:?} for a {:?} block",
            it.speaker_mask.shape(),
            it.noise_mask.shape(),
            shape
        )));
    }
    if !(0.0..=1.0).contains(&it.stop_flag) {
        return Err(Error::ContractViolation(format!(
            "stop flag {} outside [0, 1]",
            it.stop_flag
        )));
    }
    Ok(())
}

enum Termination<'a> {
    Policy(&'a StopPolicy),
    Fixed(usize),
}

/// Runs the recursion until the stop flag exceeds the iteration's threshold
/// or `max_iterations` masks have been accepted. The flagged iteration
/// contributes no masks.
pub fn separate_block(
    mixture: &MagnitudeSpectrogram,
    initial_residual: &ResidualMask,
    estimator: &mut dyn MaskEstimator,
    stop: &StopPolicy,
    options: &RecursionOptions,
) -> Result<BlockResult> {
    recurse(mixture, initial_residual, estimator, Termination::Policy(stop), options)
}

/// Training-mode recursion: exactly `num_iterations` iterations are
/// accepted whatever the flags say; all flags are recorded.
pub fn separate_block_fixed(
    mixture: &MagnitudeSpectrogram,
    initial_residual: &ResidualMask,
    estimator: &mut dyn MaskEstimator,
    num_iterations: usize,
    options: &RecursionOptions,
) -> Result<BlockResult> {
    if num_iterations == 0 {
        return Err(Error::param("num_iterations", "must be at least 1"));
    }
    recurse(
        mixture,
        initial_residual,
        estimator,
        Termination::Fixed(num_iterations),
        options,
    )
}

fn recurse(
    mixture: &MagnitudeSpectrogram,
    initial_residual: &ResidualMask,
    estimator: &mut dyn MaskEstimator,
    termination: Termination<'_>,
    options: &RecursionOptions,
) -> Result<BlockResult> {
    let shape = mixture.shape();
    check_shape("separate_block", shape, initial_residual.shape())?;
    let cap = match termination {
        Termination::Policy(p) => p.max_iterations(),
        Termination::Fixed(n) => n,
    };

    let mut residual = initial_residual.clone();
    let mut noise_sum = Array2::<f64>::zeros(shape);
    let mut result = BlockResult {
        speaker_masks: Vec::new(),
        noise_mask: Mask::zeros(shape.0, shape.1),
        flags: Vec::new(),
        stop_flag: None,
        sources: Vec::new(),
        residual_trace: options.record_residuals.then(|| vec![residual.clone()]),
    };

    for iteration in 0..cap {
        let it = estimator.estimate(mixture, &residual)?;
        check_iteration(shape, &it)?;
        if let Termination::Policy(p) = termination {
            if p.should_stop(iteration, it.stop_flag) {
                result.stop_flag = Some(it.stop_flag);
                break;
            }
        }
        residual = update_residual(&residual, &it, options.subtraction)?;
        noise_sum += it.noise_mask.data();
        if let Some(trace) = result.residual_trace.as_mut() {
            trace.push(residual.clone());
        }
        result.flags.push(it.stop_flag);
        result.sources.push(it.source);
        result.speaker_masks.push(it.speaker_mask);
    }
    result.noise_mask = Mask::clamped(noise_sum);
    Ok(result)
}
