use recsep::css::{run_css, segment, BlockOrder, BlockRange, CssConfig, CssOutput, Separator, WindowConfig};
use recsep::estimators::{LeakyOracle, MaskEstimator, OracleRsan, UpitOracle};
use recsep::metrics::{evaluate_session, si_snr};
use recsep::rsan::{separate_block, RecursionOptions};
use recsep::simulator::{concurrent_session, mix_session, SessionSpec, SessionSpectra, SessionTruth, SilenceKind};
use recsep::{Error, ResidualMask, StftConfig, StopPolicy};

const THETA: f64 = 0.05;

fn oracle() -> Separator {
    Separator::recursive(Box::new(OracleRsan::default()), StopPolicy::default())
}

fn run(truth: &SessionTruth, sep: &mut Separator, window: WindowConfig, order: BlockOrder) -> (CssOutput, Vec<usize>) {
    let stft = StftConfig::default();
    let spectra = SessionSpectra::new(truth, &stft, THETA).unwrap();
    let cfg = CssConfig { stft, window, order };
    let out = run_css(&truth.mixture, sep, &spectra, &cfg).unwrap();
    let counts = segment(spectra.num_frames(), &window)
        .iter()
        .map(|b| spectra.active_count(b))
        .collect();
    (out, counts)
}

fn window(channels: usize, dependency: bool) -> WindowConfig {
    WindowConfig::from_seconds(2.4, 0.8, channels, dependency, &StftConfig::default()).unwrap()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[test]
fn single_speaker_lands_on_one_channel() {
    let truth = mix_session(&SessionSpec {
        num_speakers: 1,
        overlap_ratio: 0.0,
        duration: 10.0,
        noise_snr_db: [20.0, 20.0],
        ..Default::default()
    })
    .unwrap();
    let (out, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Sequential);
    assert!(out.channels.iter().all(|c| c.len() == truth.mixture.len()));
    let snr = si_snr(&out.channels[0], &truth.references[0]).unwrap().unwrap();
    assert!(snr >= 20.0, "{snr}");
    let rel = 10.0 * (energy(&out.channels[1]) / energy(&out.channels[0])).log10();
    assert!(rel <= -40.0, "{rel}");
}

#[test]
fn two_speaker_session_keeps_speakers_on_their_channels() {
    let truth = mix_session(&SessionSpec::default()).unwrap();
    let (out, counts) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Sequential);
    assert_eq!(out.channel_switches(), 0);
    let report = evaluate_session(&truth, &out.channels, &out.blocks, &counts, 512).unwrap();
    assert!(report.si_snri >= 10.0, "{report:?}");
    assert_eq!(report.overflow_events, 0);
}

#[test]
fn block_order_does_not_change_masks_without_dependency() {
    let truth = mix_session(&SessionSpec {
        duration: 20.0,
        ..Default::default()
    })
    .unwrap();
    let (seq, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Sequential);
    let (shuffled, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Shuffled(9));
    let (parallel, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Parallel);
    assert_eq!(seq.masks, shuffled.masks);
    assert_eq!(seq.masks, parallel.masks);
    assert_eq!(seq.channels, parallel.channels);
}

#[test]
fn dependency_requires_sequential_processing() {
    let truth = mix_session(&SessionSpec {
        duration: 5.0,
        ..Default::default()
    })
    .unwrap();
    let stft = StftConfig::default();
    let spectra = SessionSpectra::new(&truth, &stft, THETA).unwrap();
    for order in [BlockOrder::Parallel, BlockOrder::Shuffled(1)] {
        let cfg = CssConfig {
            stft,
            window: window(2, true),
            order,
        };
        let err = run_css(&truth.mixture, &mut oracle(), &spectra, &cfg).unwrap_err();
        assert!(matches!(err, Error::DependencyRequiresSequential(_)));
    }
}

// The carried-over residual only differs from all ones where the previous
// block accepted a second source. With long silences no block holds two
// speakers, so dependency must leave the result untouched.
#[test]
fn dependency_is_a_no_op_when_blocks_hold_one_speaker() {
    let truth = mix_session(&SessionSpec {
        duration: 30.0,
        overlap_ratio: 0.0,
        silence: SilenceKind::Long,
        ..Default::default()
    })
    .unwrap();
    let (off, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Sequential);
    let (on, _) = run(&truth, &mut oracle(), window(2, true), BlockOrder::Sequential);
    assert!(off.blocks.iter().all(|b| b.iterations.unwrap() <= 1));
    assert!(off.blocks.iter().any(|b| b.iterations == Some(1)));
    assert_eq!(off.masks, on.masks);
    assert!(on.blocks.iter().all(|b| b.dependency));
}

// With overlapping speakers the later speaker of the previous block is
// removed from the head of the next one, so the oracle can only find it in
// the tail.
#[test]
fn dependency_suppresses_the_previous_later_speaker() {
    let truth = concurrent_session(4, 10.0, &[2.0, -2.0], 15.0, 16_000).unwrap();
    let (off, _) = run(&truth, &mut oracle(), window(2, false), BlockOrder::Sequential);
    let (on, _) = run(&truth, &mut oracle(), window(2, true), BlockOrder::Sequential);
    assert!(off.blocks.iter().all(|b| b.iterations == Some(2)));
    assert_eq!(on.blocks[0].iterations, Some(2));
    assert!(on.blocks.iter().any(|b| b.iterations == Some(1)));
    assert!(on.blocks.iter().all(|b| b.channel_sources[0] == Some(0)));
}

fn whole(spectra: &SessionSpectra) -> BlockRange {
    let t = spectra.num_frames();
    BlockRange {
        index: 0,
        start: 0,
        len: t,
        current: 0..t,
        valid: 0..t,
    }
}

#[test]
fn oracle_counts_concurrent_speakers() {
    let stft = StftConfig::default();
    let strict = StopPolicy::new(vec![0.6], 4).unwrap();
    let relaxed = StopPolicy::new(vec![0.6, 0.1], 4).unwrap();
    for seed in 0..30u64 {
        let speakers = 1 + (seed % 3) as usize;
        let gains: Vec<f64> = (0..speakers)
            .map(|k| [-1.0, 0.0, 1.0][(k + seed as usize) % 3])
            .collect();
        let truth = concurrent_session(seed, 2.4, &gains, 10.0, 16_000).unwrap();
        let spectra = SessionSpectra::new(&truth, &stft, THETA).unwrap();
        let block = whole(&spectra);
        let ctx = spectra.block_context(&block).unwrap();
        let mix = spectra_mixture(&truth, &stft);
        assert!(selection_margin(&ctx, &mix) > THETA, "seed {seed}");
        for stop in [&strict, &relaxed] {
            let mut est = OracleRsan::default();
            est.reset_block(Some(&ctx));
            let res = separate_block(
                &mix,
                &ResidualMask::ones(block.len, stft.num_bins()),
                &mut est,
                stop,
                &RecursionOptions::default(),
            )
            .unwrap();
            assert_eq!(res.iteration_count(), speakers, "seed {seed}");
        }
    }
}

/// Lower bound on every source's residual-weighted energy fraction when it
/// is selected: the residual then still holds at least the source's own IRM.
fn selection_margin(ctx: &recsep::OracleContext, mix: &recsep::MagnitudeSpectrogram) -> f64 {
    (0..ctx.sources().len())
        .map(|k| {
            let irm = ctx.source_irm(k);
            let w: f64 = irm
                .data()
                .iter()
                .zip(ctx.sources()[k].magnitude.iter())
                .map(|(m, a)| (m * a).powi(2))
                .sum();
            w / mix.energy()
        })
        .fold(f64::INFINITY, f64::min)
}

fn spectra_mixture(truth: &SessionTruth, stft: &StftConfig) -> recsep::MagnitudeSpectrogram {
    let (spec, _) = recsep::spectral::analyze(&truth.mixture, stft).unwrap();
    recsep::spectral::magnitude(&spec)
}

#[test]
fn leakage_grows_with_lambda() {
    let truth = mix_session(&SessionSpec {
        duration: 30.0,
        ..Default::default()
    })
    .unwrap();
    let mut last = f64::NEG_INFINITY;
    for (i, lambda) in [0.0, 0.1, 0.3].into_iter().enumerate() {
        let mut sep = Separator::recursive(
            Box::new(LeakyOracle::new(lambda, THETA).unwrap()),
            StopPolicy::default(),
        );
        let (out, counts) = run(&truth, &mut sep, window(2, false), BlockOrder::Sequential);
        let leak = evaluate_session(&truth, &out.channels, &out.blocks, &counts, 512)
            .unwrap()
            .leakage_db
            .unwrap();
        if i == 0 {
            assert!(leak <= -40.0, "{leak}");
        }
        assert!(leak > last, "{lambda}: {leak} after {last}");
        last = leak;
    }
}

#[test]
fn hot_spots_overflow_fixed_channels_but_not_recursion() {
    let truth = mix_session(&SessionSpec {
        num_speakers: 3,
        hot_spot_count: 2,
        speaker_gain_db: [-2.0, 2.0],
        ..Default::default()
    })
    .unwrap();
    let stft = StftConfig::default();
    let (upit, _) = run(
        &truth,
        &mut Separator::FixedChannel(UpitOracle::new(2).unwrap()),
        window(2, false),
        BlockOrder::Sequential,
    );
    let (rsan, _) = run(&truth, &mut oracle(), window(3, false), BlockOrder::Sequential);
    assert_eq!(rsan.overflow_events, 0);
    let hop = stft.hop_len;
    let pad = stft.frame_len - hop;
    let hot_utterances: Vec<_> = truth.utterances.iter().filter(|u| u.hot_spot).collect();
    assert_eq!(hot_utterances.len(), 6);
    for spot in hot_utterances.chunks(3) {
        let start = spot.iter().map(|u| u.start).max().unwrap();
        let end = spot.iter().map(|u| u.end).min().unwrap();
        // frames whose analysis window lies inside the three-speaker span
        let inside = |b: &recsep::css::BlockLog| {
            let first = b.frame_start.max(0) as usize * hop;
            let last = b.frame_end as usize * hop + pad;
            first >= start + pad && last <= end
        };
        assert!(upit.blocks.iter().filter(|b| inside(b)).any(|b| b.overflow));
        let hot: Vec<_> = rsan.blocks.iter().filter(|b| inside(b)).collect();
        assert!(!hot.is_empty());
        assert!(hot.iter().all(|b| b.iterations == Some(3)), "{hot:?}");
    }
}
