use ndarray::Zip;

use super::{require_context, MaskEstimator, OracleContext, Overflow};
use crate::error::{check_shape, Error, Result};
use crate::rsan::{IterationResult, ResidualMask};
use crate::spectral::{MagnitudeSpectrogram, Mask};

/// Fraction of block mixture energy above which a source counts as active.
pub const DEFAULT_ACTIVITY_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug)]
struct BlockState {
    ctx: OracleContext,
    emitted: Vec<bool>,
    iteration: usize,
}

/// One-source-at-a-time ground-truth estimator.
///
/// Each call picks, among the active sources not yet emitted in this block,
/// the one with the largest residual-weighted energy `Σ (R ⊙ A_s)²` and
/// returns its ideal ratio mask. The noise ratio mask is returned on the
/// first iteration only, so the accumulated noise mask equals it exactly.
/// The flag is 1 when no remaining source carries more than
/// `activity_threshold` of the block's mixture energy under the residual.
#[derive(Clone, Debug)]
pub struct OracleRsan {
    activity_threshold: f64,
    state: Option<BlockState>,
}

impl Default for OracleRsan {
    fn default() -> Self {
        Self {
            activity_threshold: DEFAULT_ACTIVITY_THRESHOLD,
            state: None,
        }
    }
}

struct Step {
    selected: Option<usize>,
    first: bool,
}

impl OracleRsan {
    pub fn new(activity_threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&activity_threshold) {
            return Err(Error::param(
                "activity_threshold",
                format!("{activity_threshold} is outside [0, 1)"),
            ));
        }
        Ok(Self {
            activity_threshold,
            state: None,
        })
    }

    pub fn activity_threshold(&self) -> f64 {
        self.activity_threshold
    }

    fn context(&self) -> Result<&OracleContext> {
        require_context(self.state.as_ref().map(|s| &s.ctx))
    }

    fn step(&mut self, mixture: &MagnitudeSpectrogram, residual: &ResidualMask) -> Result<Step> {
        let threshold = self.activity_threshold;
        let state = self.state.as_mut().ok_or(Error::MissingContext)?;
        check_shape("oracle mixture", state.ctx.shape(), mixture.shape())?;
        check_shape("oracle residual", state.ctx.shape(), residual.shape())?;

        let total = mixture.energy();
        let mut best: Option<(usize, f64)> = None;
        for (k, src) in state.ctx.sources().iter().enumerate() {
            if !src.active || state.emitted[k] {
                continue;
            }
            let mut weighted = 0.0;
            Zip::from(residual.data())
                .and(&src.magnitude)
                .for_each(|&r, &a| weighted += (r * a) * (r * a));
            let fraction = if total > 0.0 { weighted / total } else { 0.0 };
            // strict comparison keeps the lowest index on ties
            if fraction > threshold && best.map_or(true, |(_, f)| fraction > f) {
                best = Some((k, fraction));
            }
        }
        let first = state.iteration == 0;
        state.iteration += 1;
        if let Some((k, _)) = best {
            state.emitted[k] = true;
        }
        Ok(Step {
            selected: best.map(|(k, _)| k),
            first,
        })
    }

    fn noise_for(&self, step: &Step) -> Result<Mask> {
        let ctx = self.context()?;
        Ok(if step.first {
            ctx.noise_irm()
        } else {
            let (t, f) = ctx.shape();
            Mask::zeros(t, f)
        })
    }
}

impl MaskEstimator for OracleRsan {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn reset_block(&mut self, context: Option<&OracleContext>) {
        self.state = context.map(|ctx| BlockState {
            emitted: vec![false; ctx.sources().len()],
            ctx: ctx.clone(),
            iteration: 0,
        });
    }

    fn estimate(&mut self, mixture: &MagnitudeSpectrogram, residual: &ResidualMask) -> Result<IterationResult> {
        let step = self.step(mixture, residual)?;
        let noise_mask = self.noise_for(&step)?;
        let ctx = self.context()?;
        let (t, f) = ctx.shape();
        Ok(match step.selected {
            Some(k) => IterationResult {
                speaker_mask: ctx.source_irm(k),
                noise_mask,
                stop_flag: 0.0,
                source: Some(ctx.sources()[k].id),
            },
            None => IterationResult {
                speaker_mask: Mask::zeros(t, f),
                noise_mask,
                stop_flag: 1.0,
                source: None,
            },
        })
    }

    fn clone_box(&self) -> Box<dyn MaskEstimator> {
        Box::new(self.clone())
    }
}

/// Oracle whose speaker mask leaks a fraction `lambda` of the other active
/// sources: `(1 - λ)·IRM_s + λ·Σ_{s' ≠ s} IRM_s'`.
#[derive(Clone, Debug)]
pub struct LeakyOracle {
    lambda: f64,
    inner: OracleRsan,
}

impl LeakyOracle {
    pub fn new(lambda: f64, activity_threshold: f64) -> Result<Self> {
        if !(0.0..=0.5).contains(&lambda) {
            return Err(Error::param("lambda", format!("{lambda} is outside [0, 0.5]")));
        }
        Ok(Self {
            lambda,
            inner: OracleRsan::new(activity_threshold)?,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl MaskEstimator for LeakyOracle {
    fn name(&self) -> &'static str {
        "leaky_oracle"
    }

    fn reset_block(&mut self, context: Option<&OracleContext>) {
        self.inner.reset_block(context);
    }

    fn estimate(&mut self, mixture: &MagnitudeSpectrogram, residual: &ResidualMask) -> Result<IterationResult> {
        let step = self.inner.step(mixture, residual)?;
        let noise_mask = self.inner.noise_for(&step)?;
        let ctx = self.inner.context()?;
        let (t, f) = ctx.shape();
        let Some(k) = step.selected else {
            return Ok(IterationResult {
                speaker_mask: Mask::zeros(t, f),
                noise_mask,
                stop_flag: 1.0,
                source: None,
            });
        };
        let mut mask = ctx.source_irm(k).into_inner() * (1.0 - self.lambda);
        for (j, src) in ctx.sources().iter().enumerate() {
            if j != k && src.active {
                mask.scaled_add(self.lambda, ctx.source_irm(j).data());
            }
        }
        Ok(IterationResult {
            speaker_mask: Mask::clamped(mask),
            noise_mask,
            stop_flag: 0.0,
            source: Some(ctx.sources()[k].id),
        })
    }

    fn clone_box(&self) -> Box<dyn MaskEstimator> {
        Box::new(self.clone())
    }
}

/// All channels of a fixed-channel estimate for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct UpitEstimate {
    /// Exactly `C` masks; absent channels are all-zero.
    pub speaker_masks: Vec<Mask>,
    pub sources: Vec<Option<usize>>,
    pub noise_mask: Mask,
    pub overflow: Option<Overflow>,
}

/// Fixed-channel ground-truth baseline: emits `C` ratio masks at once,
/// ordered by source onset within the block, with zero masks for unused
/// channels. More than `C` active sources keeps the `C` most energetic and
/// records an overflow.
#[derive(Clone, Debug)]
pub struct UpitOracle {
    channels: usize,
    ctx: Option<OracleContext>,
}

impl UpitOracle {
    pub fn new(channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channels", "must be at least 1"));
        }
        Ok(Self { channels, ctx: None })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reset_block(&mut self, context: Option<&OracleContext>) {
        self.ctx = context.cloned();
    }

    pub fn estimate_all(&self, mixture: &MagnitudeSpectrogram) -> Result<UpitEstimate> {
        let ctx = require_context(self.ctx.as_ref())?;
        check_shape("uPIT mixture", ctx.shape(), mixture.shape())?;
        let (t, f) = ctx.shape();

        let mut active: Vec<(usize, f64)> = ctx
            .sources()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.active)
            .map(|(k, s)| (k, s.magnitude.iter().map(|v| v * v).sum::<f64>()))
            .collect();
        let produced = active.len();
        let overflow = (produced > self.channels).then(|| {
            active.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            active.truncate(self.channels);
            Overflow {
                produced,
                kept: self.channels,
            }
        });
        active.sort_by_key(|&(k, _)| (ctx.sources()[k].onset_frame().unwrap_or(usize::MAX), k));

        let mut speaker_masks: Vec<Mask> = active.iter().map(|&(k, _)| ctx.source_irm(k)).collect();
        let mut sources: Vec<Option<usize>> = active.iter().map(|&(k, _)| Some(ctx.sources()[k].id)).collect();
        speaker_masks.resize(self.channels, Mask::zeros(t, f));
        sources.resize(self.channels, None);
        Ok(UpitEstimate {
            speaker_masks,
            sources,
            noise_mask: ctx.noise_irm(),
            overflow,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::SourceRef;
    use crate::rsan::{separate_block, StopPolicy};
    use ndarray::Array2;

    /// Source `k` occupies bin `k` with amplitude `amps[k]`, noise on the last bin.
    fn banded(amps: &[f64], frames: usize) -> (MagnitudeSpectrogram, OracleContext) {
        let bins = amps.len() + 1;
        let sources: Vec<SourceRef> = amps
            .iter()
            .enumerate()
            .map(|(k, &a)| {
                SourceRef::active(
                    k,
                    Array2::from_shape_fn((frames, bins), |(_, f)| if f == k { a } else { 0.0 }),
                )
            })
            .collect();
        let noise = Array2::from_shape_fn((frames, bins), |(_, f)| if f == bins - 1 { 0.05 } else { 0.0 });
        let y = sources.iter().fold(noise.clone(), |acc, s| acc + &s.magnitude);
        (
            MagnitudeSpectrogram::new(y).unwrap(),
            OracleContext::new(sources, noise).unwrap(),
        )
    }

    #[test]
    fn single_source_trace() {
        let (y, ctx) = banded(&[1.0], 3);
        let mut est = OracleRsan::default();
        est.reset_block(Some(&ctx));
        let r = ResidualMask::ones(3, 2);
        let it1 = est.estimate(&y, &r).unwrap();
        assert_eq!(it1.stop_flag, 0.0);
        assert_eq!(it1.speaker_mask, ctx.source_irm(0));
        assert_eq!(it1.noise_mask, ctx.noise_irm());
        let it2 = est.estimate(&y, &r).unwrap();
        assert_eq!(it2.stop_flag, 1.0);
        assert_eq!(it2.noise_mask, Mask::zeros(3, 2));
    }

    #[test]
    fn equal_energy_tie_picks_lower_index() {
        let (y, ctx) = banded(&[1.0, 1.0], 2);
        let mut est = OracleRsan::default();
        est.reset_block(Some(&ctx));
        let it = est.estimate(&y, &ResidualMask::ones(2, 3)).unwrap();
        assert_eq!(it.source, Some(0));
    }

    #[test]
    fn missing_context_is_an_error() {
        let mut est = OracleRsan::default();
        let y = MagnitudeSpectrogram::zeros(2, 2);
        assert!(matches!(
            est.estimate(&y, &ResidualMask::ones(2, 2)),
            Err(Error::MissingContext)
        ));
        assert!(UpitOracle::new(2).unwrap().estimate_all(&y).is_err());
    }

    #[test]
    fn ratio_masks_partition_unity() {
        // Overlapping bins, additive magnitudes.
        let a0 = Array2::from_shape_fn((3, 4), |(t, f)| (t + f) as f64 * 0.3);
        let a1 = Array2::from_shape_fn((3, 4), |(t, f)| ((t * f) % 3) as f64);
        let n = Array2::from_elem((3, 4), 0.2);
        let y = MagnitudeSpectrogram::new(&a0 + &a1 + &n).unwrap();
        let ctx = OracleContext::new(vec![SourceRef::active(0, a0), SourceRef::active(1, a1)], n).unwrap();
        let mut est = OracleRsan::new(0.0).unwrap();
        est.reset_block(Some(&ctx));
        let res = separate_block(
            &y,
            &ResidualMask::ones(3, 4),
            &mut est,
            &StopPolicy::default(),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(res.iteration_count(), 2);
        let sum = res
            .speaker_masks
            .iter()
            .fold(res.noise_mask.data().clone(), |acc, m| acc + m.data());
        assert!(sum.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn leaky_lambda_zero_is_the_oracle() {
        let (y, ctx) = banded(&[2.0, 1.0, 0.7], 4);
        let mut plain = OracleRsan::default();
        let mut leaky = LeakyOracle::new(0.0, DEFAULT_ACTIVITY_THRESHOLD).unwrap();
        plain.reset_block(Some(&ctx));
        leaky.reset_block(Some(&ctx));
        let stop = StopPolicy::default();
        let r = ResidualMask::ones(4, 4);
        let a = separate_block(&y, &r, &mut plain, &stop, &Default::default()).unwrap();
        let b = separate_block(&y, &r, &mut leaky, &stop, &Default::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn leaky_half_on_equal_sources_is_symmetric() {
        let (y, ctx) = banded(&[1.0, 1.0], 2);
        let mut leaky = LeakyOracle::new(0.5, DEFAULT_ACTIVITY_THRESHOLD).unwrap();
        leaky.reset_block(Some(&ctx));
        let res = separate_block(
            &y,
            &ResidualMask::ones(2, 3),
            &mut leaky,
            &StopPolicy::default(),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(res.iteration_count(), 2);
        assert_eq!(res.speaker_masks[0], res.speaker_masks[1]);
        assert!(LeakyOracle::new(0.6, 0.05).is_err());
        assert!(LeakyOracle::new(-0.1, 0.05).is_err());
    }

    #[test]
    fn upit_pads_and_orders_by_onset() {
        // source 0 starts at frame 2, source 1 at frame 0
        let a0 = Array2::from_shape_fn((4, 3), |(t, f)| if f == 0 && t >= 2 { 1.0 } else { 0.0 });
        let a1 = Array2::from_shape_fn((4, 3), |(_, f)| if f == 1 { 1.0 } else { 0.0 });
        let n = Array2::from_elem((4, 3), 0.01);
        let y = MagnitudeSpectrogram::new(&a0 + &a1 + &n).unwrap();
        let ctx = OracleContext::new(vec![SourceRef::active(0, a0), SourceRef::active(1, a1)], n).unwrap();
        let mut up = UpitOracle::new(3).unwrap();
        up.reset_block(Some(&ctx));
        let est = up.estimate_all(&y).unwrap();
        assert_eq!(est.sources, vec![Some(1), Some(0), None]);
        assert_eq!(est.speaker_masks[2], Mask::zeros(4, 3));
        assert!(est.overflow.is_none());
    }

    #[test]
    fn upit_single_source_gets_two_zero_channels() {
        let (y, ctx) = banded(&[1.0], 3);
        let mut up = UpitOracle::new(3).unwrap();
        up.reset_block(Some(&ctx));
        let est = up.estimate_all(&y).unwrap();
        assert_eq!(est.speaker_masks.len(), 3);
        assert_eq!(est.speaker_masks[0], ctx.source_irm(0));
        assert_eq!(est.speaker_masks[1].energy() + est.speaker_masks[2].energy(), 0.0);
    }

    #[test]
    fn upit_overflow_drops_weakest() {
        let (y, ctx) = banded(&[1.0, 0.2, 3.0], 3);
        let mut up = UpitOracle::new(2).unwrap();
        up.reset_block(Some(&ctx));
        let est = up.estimate_all(&y).unwrap();
        assert_eq!(est.overflow, Some(Overflow { produced: 3, kept: 2 }));
        let mut kept: Vec<_> = est.sources.iter().flatten().copied().collect();
        kept.sort();
        assert_eq!(kept, vec![0, 2]);
    }
}
