//! Continuous separation of a long recording.
//!
//! The mixture spectrogram is cut into overlapping blocks of
//! `n_p + n_c + n_f` frames that advance by `n_c`. Each block is separated
//! on its own (or, with block dependency, seeded from the previous block),
//! zero-padded to a fixed channel count and aligned to the previous block by
//! mask distance over the frames they share. Only the `n_c` centre frames of
//! each aligned block are written to the global masks, so every frame comes
//! from exactly one block. The global masks are applied to the full mixture
//! spectrogram and resynthesized once.

use std::io::Write;
use std::ops::Range;

use itertools::Itertools;
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};
use crate::estimators::{MaskEstimator, OracleContext, Overflow, UpitOracle};
use crate::rsan::{separate_block, BlockResult, RecursionOptions, ResidualMask, StopPolicy};
use crate::spectral::{analyze, apply_mask, magnitude, synthesize, MagnitudeSpectrogram, Mask, StftConfig};

/// Largest channel count for the exhaustive stitching search.
pub const MAX_STITCH_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Past context frames.
    pub n_p: usize,
    /// Current frames; also the hop between blocks.
    pub n_c: usize,
    /// Future context frames.
    pub n_f: usize,
    pub channels: usize,
    pub dependency: bool,
}

impl WindowConfig {
    pub fn new(n_p: usize, n_c: usize, n_f: usize, channels: usize, dependency: bool) -> Result<Self> {
        let cfg = Self {
            n_p,
            n_c,
            n_f,
            channels,
            dependency,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Block and hop given in seconds; the overlap is split evenly between
    /// past and future context (the extra frame, if any, goes to the future).
    pub fn from_seconds(
        block_s: f64,
        hop_s: f64,
        channels: usize,
        dependency: bool,
        stft: &StftConfig,
    ) -> Result<Self> {
        if !(block_s > 0.0 && hop_s > 0.0) {
            return Err(Error::param("block", "block and hop durations must be positive"));
        }
        let block = stft.seconds_to_frames(block_s);
        let hop = stft.seconds_to_frames(hop_s);
        if hop == 0 || hop >= block {
            return Err(Error::param(
                "block",
                format!("hop of {hop} frames must be positive and shorter than the {block}-frame block"),
            ));
        }
        let overlap = block - hop;
        Self::new(overlap / 2, hop, overlap - overlap / 2, channels, dependency)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::param("n_c", "current region must hold at least one frame"));
        }
        if self.channels == 0 {
            return Err(Error::param("channels", "must be at least 1"));
        }
        Ok(())
    }

    pub fn block_len(&self) -> usize {
        self.n_p + self.n_c + self.n_f
    }

    /// Frames shared by adjacent blocks.
    pub fn overlap(&self) -> usize {
        self.n_p + self.n_f
    }
}

/// One block's position on the global frame axis. Frames of the block
/// outside `valid` are zero padding.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockRange {
    pub index: usize,
    /// Global frame of the block's first row (negative when left-padded).
    pub start: isize,
    pub len: usize,
    /// Global frames this block writes to the output.
    pub current: Range<usize>,
    /// Global frames of the block that exist in the signal.
    pub valid: Range<usize>,
}

impl BlockRange {
    fn local(&self, global: Range<usize>) -> Range<usize> {
        let off = |g: usize| (g as isize - self.start) as usize;
        off(global.start)..off(global.end)
    }

    pub fn current_rows(&self) -> Range<usize> {
        self.local(self.current.clone())
    }

    pub fn valid_rows(&self) -> Range<usize> {
        self.local(self.valid.clone())
    }

    pub fn is_padded(&self) -> bool {
        self.valid.len() < self.len
    }

    fn global_span(&self) -> Range<isize> {
        self.start..self.start + self.len as isize
    }
}

/// Blocks start every `n_c` frames with `n_p` frames of past context, so
/// block `k` writes frames `k·n_c .. (k+1)·n_c`. A signal shorter than one
/// block becomes a single right-padded block that writes every frame.
pub fn segment(total_frames: usize, cfg: &WindowConfig) -> Vec<BlockRange> {
    let len = cfg.block_len();
    if total_frames == 0 {
        return Vec::new();
    }
    if total_frames < len {
        return vec![BlockRange {
            index: 0,
            start: 0,
            len,
            current: 0..total_frames,
            valid: 0..total_frames,
        }];
    }
    (0..total_frames.div_ceil(cfg.n_c))
        .map(|k| {
            let start = (k * cfg.n_c) as isize - cfg.n_p as isize;
            let end = start + len as isize;
            BlockRange {
                index: k,
                start,
                len,
                current: k * cfg.n_c..((k + 1) * cfg.n_c).min(total_frames),
                valid: start.max(0) as usize..(end.max(0) as usize).min(total_frames),
            }
        })
        .collect()
}

/// Masks of one block padded (or trimmed) to the output channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedChannels {
    pub masks: Vec<Mask>,
    pub sources: Vec<Option<usize>>,
    pub overflow: Option<Overflow>,
}

/// Appends zero masks up to `channels`. With more masks than channels the
/// most energetic ones are kept in extraction order and an overflow is
/// recorded.
pub fn zero_pad_channels(block: &BlockResult, channels: usize) -> PaddedChannels {
    let (t, f) = block.noise_mask.shape();
    let n = block.speaker_masks.len();
    let mut keep: Vec<usize> = (0..n).collect();
    let overflow = (n > channels).then(|| {
        let energies: Vec<f64> = block.speaker_masks.iter().map(Mask::energy).collect();
        keep.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
        keep.truncate(channels);
        keep.sort_unstable();
        Overflow {
            produced: n,
            kept: channels,
        }
    });
    let mut masks: Vec<Mask> = keep.iter().map(|&i| block.speaker_masks[i].clone()).collect();
    let mut sources: Vec<Option<usize>> = keep.iter().map(|&i| block.sources[i]).collect();
    masks.resize(channels, Mask::zeros(t, f));
    sources.resize(channels, None);
    PaddedChannels {
        masks,
        sources,
        overflow,
    }
}

/// `permutation[g]` is the local channel written to global channel `g`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChannelAssignment {
    pub permutation: Vec<usize>,
    /// Shared-region squared distance per global channel.
    pub distances: Vec<f64>,
    pub total: f64,
}

impl ChannelAssignment {
    pub fn identity(channels: usize) -> Self {
        Self {
            permutation: (0..channels).collect(),
            distances: vec![0.0; channels],
            total: 0.0,
        }
    }
}

fn sq_distance(a: &Mask, a_rows: Range<usize>, b: &Mask, b_rows: Range<usize>) -> f64 {
    a.data()
        .slice(s![a_rows, ..])
        .iter()
        .zip(b.data().slice(s![b_rows, ..]).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Aligns `cur` to `prev` by minimizing the summed squared mask distance
/// between `prev[prev_rows]` and `cur[cur_rows]` over all channel
/// permutations. Ties keep the lexicographically first permutation.
pub fn stitch_rows(
    prev: &[Mask],
    prev_rows: Range<usize>,
    cur: &[Mask],
    cur_rows: Range<usize>,
) -> Result<ChannelAssignment> {
    let c = prev.len();
    if cur.len() != c {
        return Err(Error::CardinalityMismatch {
            context: "stitching channels",
            expected: c,
            actual: cur.len(),
        });
    }
    if c > MAX_STITCH_CHANNELS {
        return Err(Error::PermutationSearchTooLarge {
            size: c,
            bound: MAX_STITCH_CHANNELS,
        });
    }
    if prev_rows.len() != cur_rows.len() {
        return Err(Error::param("overlap", "shared regions differ in length"));
    }
    for m in prev.iter().chain(cur) {
        if prev_rows.end > m.shape().0 || cur_rows.end > m.shape().0 {
            return Err(Error::param("overlap", "shared region exceeds the block"));
        }
    }
    let cost: Vec<Vec<f64>> = prev
        .iter()
        .map(|p| {
            cur.iter()
                .map(|q| sq_distance(p, prev_rows.clone(), q, cur_rows.clone()))
                .collect()
        })
        .collect();
    let mut best: Option<ChannelAssignment> = None;
    for perm in (0..c).permutations(c) {
        let distances: Vec<f64> = perm.iter().enumerate().map(|(g, &l)| cost[g][l]).collect();
        let total = distances.iter().sum();
        if best.as_ref().map_or(true, |b| total < b.total) {
            best = Some(ChannelAssignment {
                permutation: perm,
                distances,
                total,
            });
        }
    }
    Ok(best.unwrap_or_else(|| ChannelAssignment::identity(c)))
}

/// Aligns on the last `overlap` rows of `prev` against the first `overlap`
/// rows of `cur`.
pub fn stitch(prev: &[Mask], cur: &[Mask], overlap: usize) -> Result<ChannelAssignment> {
    if overlap == 0 {
        return Err(Error::param("overlap", "must be at least one frame"));
    }
    let rows = prev.first().map_or(0, |m| m.shape().0);
    if overlap > rows {
        return Err(Error::param(
            "overlap",
            format!("{overlap} exceeds block length {rows}"),
        ));
    }
    stitch_rows(prev, rows - overlap..rows, cur, 0..overlap)
}

/// Initial residual carried over from the previous block:
/// `D = clamp(1 − Σ_{i≥2} M_i, 0, 1)` over the previous block's speaker
/// masks in extraction order; the first `overlap` rows of the result are the
/// last `overlap` rows of `D`, the remaining rows are one.
pub fn dependency_residual(prev_masks: &[Mask], block_len: usize, bins: usize, overlap: usize) -> Result<ResidualMask> {
    if overlap > block_len {
        return Err(Error::param(
            "overlap",
            format!("{overlap} exceeds block length {block_len}"),
        ));
    }
    let mut later = Array2::<f64>::zeros((block_len, bins));
    for m in prev_masks {
        check_shape("dependency mask", (block_len, bins), m.shape())?;
    }
    for m in prev_masks.iter().skip(1) {
        later += m.data();
    }
    let d = later.mapv(|v| (1.0 - v).clamp(0.0, 1.0));
    let mut r = Array2::ones((block_len, bins));
    r.slice_mut(s![..overlap, ..])
        .assign(&d.slice(s![block_len - overlap.., ..]));
    ResidualMask::new(r)
}

/// Supplies per-block ground truth to oracle estimators.
pub trait ContextProvider: Sync {
    fn context(&self, block: &BlockRange) -> Result<Option<OracleContext>>;
}

/// Provider for estimators that need no ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoContext;

impl ContextProvider for NoContext {
    fn context(&self, _block: &BlockRange) -> Result<Option<OracleContext>> {
        Ok(None)
    }
}

/// The per-block separator: the recursive engine with a mask estimator, or
/// the fixed-channel baseline.
pub enum Separator {
    Recursive {
        estimator: Box<dyn MaskEstimator>,
        stop: StopPolicy,
        options: RecursionOptions,
    },
    FixedChannel(UpitOracle),
}

impl Separator {
    pub fn recursive(estimator: Box<dyn MaskEstimator>, stop: StopPolicy) -> Self {
        Separator::Recursive {
            estimator,
            stop,
            options: RecursionOptions::default(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Separator::Recursive { estimator, .. } => estimator.name(),
            Separator::FixedChannel(_) => "upit_oracle",
        }
    }
}

/// Order in which blocks are separated. Stitching always runs in block
/// order afterwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockOrder {
    #[default]
    Sequential,
    /// Separate blocks in a seeded random order.
    Shuffled(u64),
    /// Separate blocks on the rayon pool.
    Parallel,
}

impl BlockOrder {
    fn label(self) -> &'static str {
        match self {
            BlockOrder::Sequential => "sequential",
            BlockOrder::Shuffled(_) => "shuffled",
            BlockOrder::Parallel => "parallel",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CssConfig {
    pub stft: StftConfig,
    pub window: WindowConfig,
    pub order: BlockOrder,
}

/// One line of the per-block log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLog {
    pub block: usize,
    pub frame_start: isize,
    pub frame_end: isize,
    pub current: Range<usize>,
    /// Accepted recursions; absent for the fixed-channel separator.
    pub iterations: Option<usize>,
    pub flags: Vec<f64>,
    pub stop_flag: Option<f64>,
    pub assignment: Vec<usize>,
    pub distance: f64,
    /// Ground-truth source on each global channel, when known.
    pub channel_sources: Vec<Option<usize>>,
    pub overflow: bool,
    pub dependency: bool,
}

#[derive(Clone, Debug)]
pub struct CssOutput {
    /// One waveform per output channel, each as long as the input.
    pub channels: Vec<Vec<f64>>,
    /// Stitched global masks, one per channel.
    pub masks: Vec<Mask>,
    pub blocks: Vec<BlockLog>,
    pub overflow_events: usize,
}

/// Number of times a source present in two consecutive blocks moved to
/// another global channel.
pub fn channel_switches(blocks: &[BlockLog]) -> usize {
    blocks
        .windows(2)
        .map(|w| {
            w[1].channel_sources
                .iter()
                .enumerate()
                .filter_map(|(g, s)| s.map(|s| (g, s)))
                .filter(|&(g, s)| {
                    w[0].channel_sources
                        .iter()
                        .position(|&p| p == Some(s))
                        .is_some_and(|pg| pg != g)
                })
                .count()
        })
        .sum()
}

impl CssOutput {
    pub fn channel_switches(&self) -> usize {
        channel_switches(&self.blocks)
    }

    pub fn write_block_log<W: Write>(&self, mut out: W) -> Result<()> {
        for b in &self.blocks {
            serde_json::to_writer(&mut out, b).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Separation result of one block before alignment.
struct LocalBlock {
    speaker_masks: Vec<Mask>,
    padded: PaddedChannels,
    iterations: Option<usize>,
    flags: Vec<f64>,
    stop_flag: Option<f64>,
}

fn separate_one(
    block: &BlockRange,
    mixture: &MagnitudeSpectrogram,
    initial: &ResidualMask,
    separator: &mut Separator,
    provider: &dyn ContextProvider,
    channels: usize,
) -> Result<LocalBlock> {
    let block_mix = mixture.window(block.start, block.len);
    let ctx = provider.context(block)?;
    let valid = block.valid_rows();
    let zero_padding = |m: &mut Mask| {
        m.zero_rows(0..valid.start);
        m.zero_rows(valid.end..block.len);
    };
    match separator {
        Separator::Recursive {
            estimator,
            stop,
            options,
        } => {
            estimator.reset_block(ctx.as_ref());
            let mut res = separate_block(&block_mix, initial, estimator.as_mut(), stop, options)?;
            res.speaker_masks.iter_mut().for_each(zero_padding);
            let padded = zero_pad_channels(&res, channels);
            Ok(LocalBlock {
                iterations: Some(res.iteration_count()),
                flags: res.flags,
                stop_flag: res.stop_flag,
                speaker_masks: res.speaker_masks,
                padded,
            })
        }
        Separator::FixedChannel(upit) => {
            upit.reset_block(ctx.as_ref());
            let mut est = upit.estimate_all(&block_mix)?;
            est.speaker_masks.iter_mut().for_each(zero_padding);
            let padded = PaddedChannels {
                masks: est.speaker_masks.clone(),
                sources: est.sources,
                overflow: est.overflow,
            };
            Ok(LocalBlock {
                speaker_masks: est.speaker_masks,
                padded,
                iterations: None,
                flags: Vec::new(),
                stop_flag: None,
            })
        }
    }
}

fn fork(separator: &Separator) -> Separator {
    match separator {
        Separator::Recursive {
            estimator,
            stop,
            options,
        } => Separator::Recursive {
            estimator: estimator.clone_box(),
            stop: stop.clone(),
            options: *options,
        },
        Separator::FixedChannel(u) => Separator::FixedChannel(u.clone()),
    }
}

/// Runs the whole pipeline on a mono session waveform.
pub fn run_css(
    session: &[f64],
    separator: &mut Separator,
    provider: &dyn ContextProvider,
    cfg: &CssConfig,
) -> Result<CssOutput> {
    cfg.window.validate()?;
    let window = cfg.window;
    if window.channels > MAX_STITCH_CHANNELS {
        return Err(Error::PermutationSearchTooLarge {
            size: window.channels,
            bound: MAX_STITCH_CHANNELS,
        });
    }
    if window.dependency {
        if cfg.order != BlockOrder::Sequential {
            return Err(Error::DependencyRequiresSequential(cfg.order.label()));
        }
        if matches!(separator, Separator::FixedChannel(_)) {
            return Err(Error::param("dependency", "requires the recursive separator"));
        }
    }
    if let Separator::FixedChannel(u) = separator {
        if u.channels() != window.channels {
            return Err(Error::param(
                "channels",
                format!(
                    "fixed-channel separator has {} channels, window expects {}",
                    u.channels(),
                    window.channels
                ),
            ));
        }
    }
    if session.is_empty() {
        return Err(Error::InputTooShort { len: 0, needed: 1 });
    }

    let (spec, framing) = analyze(session, &cfg.stft)?;
    let mixture = magnitude(&spec);
    let (frames, bins) = mixture.shape();
    let blocks = segment(frames, &window);
    let block_len = window.block_len();
    let ones = ResidualMask::ones(block_len, bins);

    let locals: Vec<LocalBlock> = if window.dependency {
        let mut out: Vec<LocalBlock> = Vec::with_capacity(blocks.len());
        for b in &blocks {
            let initial = match out.last() {
                Some(prev) => dependency_residual(&prev.speaker_masks, block_len, bins, window.overlap())?,
                None => ones.clone(),
            };
            out.push(separate_one(
                b,
                &mixture,
                &initial,
                separator,
                provider,
                window.channels,
            )?);
        }
        out
    } else {
        match cfg.order {
            BlockOrder::Sequential => blocks
                .iter()
                .map(|b| separate_one(b, &mixture, &ones, separator, provider, window.channels))
                .collect::<Result<_>>()?,
            BlockOrder::Shuffled(seed) => {
                let mut order: Vec<usize> = (0..blocks.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let mut slots: Vec<Option<LocalBlock>> = (0..blocks.len()).map(|_| None).collect();
                for i in order {
                    slots[i] = Some(separate_one(
                        &blocks[i],
                        &mixture,
                        &ones,
                        separator,
                        provider,
                        window.channels,
                    )?);
                }
                slots.into_iter().map(|s| s.expect("every block separated")).collect()
            }
            BlockOrder::Parallel => {
                let template = &*separator;
                blocks
                    .par_iter()
                    .map(|b| {
                        let mut own = fork(template);
                        separate_one(b, &mixture, &ones, &mut own, provider, window.channels)
                    })
                    .collect::<Result<_>>()?
            }
        }
    };

    let mut canvas: Vec<Array2<f64>> = (0..window.channels).map(|_| Array2::zeros((frames, bins))).collect();
    let mut logs = Vec::with_capacity(blocks.len());
    let mut prev: Option<(&BlockRange, Vec<Mask>)> = None;
    let mut overflow_events = 0;
    for (b, local) in blocks.iter().zip(locals) {
        let assignment = match &prev {
            Some((pb, pmasks)) => {
                let span = pb.global_span();
                let cur = b.global_span();
                let lo = span.start.max(cur.start).max(0);
                let hi = span.end.min(cur.end).min(frames as isize);
                if lo < hi {
                    let (lo, hi) = (lo as usize, hi as usize);
                    stitch_rows(pmasks, pb.local(lo..hi), &local.padded.masks, b.local(lo..hi))?
                } else {
                    ChannelAssignment::identity(window.channels)
                }
            }
            None => ChannelAssignment::identity(window.channels),
        };
        let aligned: Vec<Mask> = assignment
            .permutation
            .iter()
            .map(|&l| local.padded.masks[l].clone())
            .collect();
        let rows = b.current_rows();
        for (c, m) in aligned.iter().enumerate() {
            canvas[c]
                .slice_mut(s![b.current.clone(), ..])
                .assign(&m.data().slice(s![rows.clone(), ..]));
        }
        overflow_events += usize::from(local.padded.overflow.is_some());
        logs.push(BlockLog {
            block: b.index,
            frame_start: b.start,
            frame_end: b.start + b.len as isize,
            current: b.current.clone(),
            iterations: local.iterations,
            flags: local.flags,
            stop_flag: local.stop_flag,
            channel_sources: assignment
                .permutation
                .iter()
                .map(|&l| local.padded.sources[l])
                .collect(),
            assignment: assignment.permutation,
            distance: assignment.total,
            overflow: local.padded.overflow.is_some(),
            dependency: window.dependency,
        });
        prev = Some((b, aligned));
    }

    let masks: Vec<Mask> = canvas.into_iter().map(Mask::clamped).collect();
    let channels = masks
        .iter()
        .map(|m| synthesize(&apply_mask(m, &spec)?, &framing))
        .collect::<Result<_>>()?;
    Ok(CssOutput {
        channels,
        masks,
        blocks: logs,
        overflow_events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::ScriptedEstimator;

    fn win(n_p: usize, n_c: usize, n_f: usize) -> WindowConfig {
        WindowConfig::new(n_p, n_c, n_f, 2, false).unwrap()
    }

    #[test]
    fn block_geometry_in_frames() {
        let stft = StftConfig::default();
        let w = WindowConfig::from_seconds(2.4, 0.8, 2, false, &stft).unwrap();
        assert_eq!((w.block_len(), w.n_c, w.overlap()), (150, 50, 100));
        let w = WindowConfig::from_seconds(4.8, 0.8, 3, false, &stft).unwrap();
        assert_eq!((w.block_len(), w.n_c), (300, 50));
        assert!(WindowConfig::from_seconds(0.8, 0.8, 2, false, &stft).is_err());
    }

    #[test]
    fn segment_block_length_signal() {
        let blocks = segment(150, &win(50, 50, 50));
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks.iter().filter(|b| !b.is_padded()).count(), 1);
        assert_eq!(blocks[1].start, 0);
        assert_eq!(blocks[0].valid_rows(), 50..150);
        assert_eq!(blocks[2].valid_rows(), 0..100);
        let mut covered = vec![0; 150];
        for b in &blocks {
            for t in b.current.clone() {
                covered[t] += 1;
            }
            let rows = b.current_rows();
            assert!(rows.start >= b.valid_rows().start && rows.end <= b.valid_rows().end);
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn short_signal_single_block() {
        let blocks = segment(40, &win(50, 50, 50));
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].current, 0..40);
        assert!(blocks[0].is_padded());
        assert_eq!(blocks[0].current_rows(), 0..40);
    }

    fn block_with(masks: Vec<Mask>) -> BlockResult {
        let (t, f) = masks[0].shape();
        BlockResult {
            sources: (0..masks.len()).map(Some).collect(),
            flags: vec![0.0; masks.len()],
            speaker_masks: masks,
            noise_mask: Mask::zeros(t, f),
            stop_flag: None,
            residual_trace: None,
        }
    }

    fn filled(v: f64) -> Mask {
        Mask::new(Array2::from_elem((2, 2), v)).unwrap()
    }

    #[test]
    fn zero_padding_examples() {
        let p = zero_pad_channels(&block_with(vec![filled(0.5)]), 3);
        assert_eq!(p.masks, vec![filled(0.5), filled(0.0), filled(0.0)]);
        assert!(p.overflow.is_none());

        let three = vec![filled(0.1), filled(0.2), filled(0.3)];
        assert_eq!(zero_pad_channels(&block_with(three.clone()), 3).masks, three);

        let four = vec![filled(0.4), filled(0.1), filled(0.9), filled(0.3)];
        let p = zero_pad_channels(&block_with(four), 3);
        assert_eq!(p.masks, vec![filled(0.4), filled(0.9), filled(0.3)]);
        assert_eq!(p.sources, vec![Some(0), Some(2), Some(3)]);
        assert_eq!(p.overflow, Some(Overflow { produced: 4, kept: 3 }));
    }

    fn rows_mask(rows: &[[f64; 2]]) -> Mask {
        Mask::new(Array2::from_shape_fn((rows.len(), 2), |(t, f)| rows[t][f])).unwrap()
    }

    #[test]
    fn stitch_examples() {
        let a = rows_mask(&[[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]]);
        let b = rows_mask(&[[0.1, 0.9], [0.2, 0.6], [0.0, 1.0]]);
        let same = stitch(&[a.clone(), b.clone()], &[a.clone(), b.clone()], 3).unwrap();
        assert_eq!(same.permutation, vec![0, 1]);
        assert_eq!(same.total, 0.0);

        let swapped = stitch(&[a.clone(), b.clone()], &[b.clone(), a.clone()], 3).unwrap();
        assert_eq!(swapped.permutation, vec![1, 0]);

        let z = Mask::zeros(3, 2);
        let padded = stitch(&[a.clone(), z.clone()], &[z.clone(), a.clone()], 3).unwrap();
        assert_eq!(padded.permutation, vec![1, 0]);
        assert_eq!(padded.distances[1], 0.0);

        assert!(stitch(std::slice::from_ref(&a), std::slice::from_ref(&a), 0).is_err());
        let five = vec![z.clone(); 5];
        assert!(matches!(
            stitch(&five, &five, 1),
            Err(Error::PermutationSearchTooLarge { .. })
        ));
    }

    #[test]
    fn dependency_residual_single_speaker_is_all_one() {
        let r = dependency_residual(&[filled(0.7)], 2, 2, 1).unwrap();
        assert_eq!(r, ResidualMask::ones(2, 2));
        let r = dependency_residual(&[], 2, 2, 1).unwrap();
        assert_eq!(r, ResidualMask::ones(2, 2));
    }

    #[test]
    fn dependency_residual_only_touches_head() {
        let m1 = rows_mask(&[[0.5, 0.5], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]);
        let m2 = rows_mask(&[[0.1, 0.2], [0.3, 0.4], [0.6, 0.0], [1.0, 0.25]]);
        let r = dependency_residual(&[m1, m2], 4, 2, 3).unwrap();
        let expected = [[0.7, 0.6], [0.4, 1.0], [0.0, 0.75], [1.0, 1.0]];
        for (row, want) in r.data().rows().into_iter().zip(expected) {
            for (got, want) in row.iter().zip(want) {
                assert!((got - want).abs() < 1e-15);
            }
        }
        assert!(dependency_residual(&[], 4, 2, 5).is_err());
    }

    #[test]
    fn dependency_rejects_non_sequential_orders() {
        let cfg = CssConfig {
            stft: StftConfig::default(),
            window: WindowConfig::new(2, 2, 2, 2, true).unwrap(),
            order: BlockOrder::Parallel,
        };
        let mut sep = Separator::recursive(Box::new(ScriptedEstimator::always_stop()), StopPolicy::default());
        let err = run_css(&vec![0.0; 4000], &mut sep, &NoContext, &cfg).unwrap_err();
        assert!(matches!(err, Error::DependencyRequiresSequential("parallel")));
    }

    #[test]
    fn always_stop_produces_silent_channels_of_input_length() {
        let cfg = CssConfig {
            stft: StftConfig::default(),
            window: WindowConfig::new(4, 4, 4, 2, false).unwrap(),
            order: BlockOrder::Sequential,
        };
        let x: Vec<f64> = (0..5000).map(|n| (n as f64 * 0.01).sin()).collect();
        let mut sep = Separator::recursive(Box::new(ScriptedEstimator::always_stop()), StopPolicy::default());
        let out = run_css(&x, &mut sep, &NoContext, &cfg).unwrap();
        assert_eq!(out.channels.len(), 2);
        assert!(out
            .channels
            .iter()
            .all(|c| c.len() == x.len() && c.iter().all(|&v| v == 0.0)));
        assert!(out.blocks.iter().all(|b| b.iterations == Some(0)));
    }
}
