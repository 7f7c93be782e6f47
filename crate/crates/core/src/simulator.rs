//! Synthetic meeting sessions with exact ground truth.
//!
//! Sources are harmonic complexes with a per-speaker fundamental, slow pitch
//! drift, 2–8 Hz amplitude modulation and a faint noise floor. A session
//! places utterances round-robin on a timeline, sizing the overlap at each
//! speaker change so that overlapped time over speech time hits the
//! requested ratio, and adds pink noise at a drawn SNR. Everything is
//! additive, so the mixture is exactly the sum of the references and noise.
//!
//! Randomness comes from one root seed split into named substreams, so
//! changing one kind of draw leaves the others untouched.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::css::{BlockRange, ContextProvider};
use crate::error::{Error, Result};
use crate::estimators::{OracleContext, SourceRef, DEFAULT_ACTIVITY_THRESHOLD};
use crate::spectral::{analyze, magnitude, MagnitudeSpectrogram, StftConfig};
use crate::wav::{write_wav, WavFormat};

/// Silence before the first and after the last utterance, seconds.
pub const EDGE_SILENCE: f64 = 0.5;

/// Hot spot geometry: three utterances starting 0.4 s apart and ending
/// together, so all three overlap for 4 s.
const HOT_STARTS: [f64; 3] = [0.0, 0.4, 0.8];
const HOT_SPAN: f64 = 4.8;
const HOT_GAP: f64 = 0.5;

/// Largest share of the shorter neighbour that one speaker change may
/// overlap; keeps at most two speakers active outside hot spots.
const MAX_JUNCTION_SHARE: f64 = 0.49;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SilenceKind {
    /// 0.1–0.5 s between utterances.
    #[default]
    Short,
    /// 2.9–3.0 s between utterances.
    Long,
}

impl SilenceKind {
    fn range(self) -> (f64, f64) {
        match self {
            SilenceKind::Short => (0.1, 0.5),
            SilenceKind::Long => (2.9, 3.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSpec {
    pub name: String,
    pub seed: u64,
    /// Seconds.
    pub duration: f64,
    pub num_speakers: usize,
    pub overlap_ratio: f64,
    /// Gap between utterances when `overlap_ratio` is zero.
    pub silence: SilenceKind,
    /// Utterance length range, seconds.
    pub utterance_len: [f64; 2],
    pub speaker_gain_db: [f64; 2],
    pub noise_snr_db: [f64; 2],
    /// Regions where three speakers talk at once.
    pub hot_spot_count: usize,
    pub sample_rate: u32,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            name: "session".into(),
            seed: 0,
            duration: 60.0,
            num_speakers: 2,
            overlap_ratio: 0.3,
            silence: SilenceKind::Short,
            utterance_len: [2.0, 6.0],
            speaker_gain_db: [-5.0, 5.0],
            noise_snr_db: [0.0, 10.0],
            hot_spot_count: 0,
            sample_rate: 16_000,
        }
    }
}

fn ordered(name: &'static str, r: [f64; 2]) -> Result<()> {
    if r.iter().all(|v| v.is_finite()) && r[0] <= r[1] {
        Ok(())
    } else {
        Err(Error::param(name, format!("range [{}, {}] is not ordered", r[0], r[1])))
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.num_speakers) {
            return Err(Error::param("num_speakers", "must be 1, 2 or 3"));
        }
        if !(self.duration.is_finite() && self.duration > 2.0 * EDGE_SILENCE) {
            return Err(Error::param(
                "duration",
                format!("must exceed {} s", 2.0 * EDGE_SILENCE),
            ));
        }
        if !(0.0..=1.0).contains(&self.overlap_ratio) {
            return Err(Error::param("overlap_ratio", "must lie in [0, 1]"));
        }
        if self.sample_rate == 0 {
            return Err(Error::param("sample_rate", "must be positive"));
        }
        ordered("utterance_len", self.utterance_len)?;
        ordered("speaker_gain_db", self.speaker_gain_db)?;
        ordered("noise_snr_db", self.noise_snr_db)?;
        if self.utterance_len[0] <= 0.0 {
            return Err(Error::param("utterance_len", "lengths must be positive"));
        }
        if self.hot_spot_count > 0 && self.num_speakers < 3 {
            return Err(Error::param("hot_spot_count", "hot spots need three speakers"));
        }
        if self.overlap_ratio > 0.0 && self.num_speakers == 1 {
            return Err(Error::InfeasibleOverlap {
                requested: self.overlap_ratio,
                min: 0.0,
                max: 0.0,
            });
        }
        Ok(())
    }

    /// Overlap condition label: `0S`/`0L` for no overlap, else the percent.
    pub fn condition(&self) -> String {
        if self.overlap_ratio == 0.0 {
            match self.silence {
                SilenceKind::Short => "0S".into(),
                SilenceKind::Long => "0L".into(),
            }
        } else {
            format!("{}", (self.overlap_ratio * 100.0).round())
        }
    }
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Independent generator for the substream `name` of `seed`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Nominal fundamental of a speaker: 90–300 Hz in 10 Hz steps. Ids that
/// differ modulo 22 get different fundamentals.
pub fn fundamental(speaker_id: usize) -> f64 {
    90.0 + 10.0 * ((speaker_id * 7) % 22) as f64
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// Speech-like test signal of `duration` seconds with unit RMS.
pub fn gen_source(seed: u64, duration: f64, speaker_id: usize, sample_rate: u32) -> Vec<f64> {
    let sr = f64::from(sample_rate);
    let n = (duration.max(0.0) * sr).round() as usize;
    let mut rng = substream(seed, &format!("source/{speaker_id}"));
    let f0 = fundamental(speaker_id);
    let drift_rate = rng.gen_range(0.1..0.5);
    let drift_phase = rng.gen_range(0.0..2.0 * PI);
    let am_rate = rng.gen_range(2.0..=8.0);
    let am_phase = rng.gen_range(0.0..2.0 * PI);
    let top = 4000.0_f64.min(0.45 * sr);
    let harmonics = ((top / (f0 * 1.02)).floor() as usize).max(1);
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();

    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0_f64;
    for i in 0..n {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + 0.02 * (2.0 * PI * drift_rate * t + drift_phase).sin());
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        let env = 0.6 + 0.4 * (2.0 * PI * am_rate * t + am_phase).sin();
        let s: f64 = phases
            .iter()
            .enumerate()
            .map(|(k, p)| ((k + 1) as f64 * phase + p).sin() / (k + 1) as f64)
            .sum();
        out.push(env * s);
    }

    let voiced = rms(&out);
    let mut floor = Vec::with_capacity(n);
    let mut y = 0.0;
    for _ in 0..n {
        y += 0.3 * (rng.gen_range(-1.0..1.0) - y);
        floor.push(y);
    }
    let floor_rms = rms(&floor);
    if floor_rms > 0.0 {
        let g = voiced * 10f64.powf(-30.0 / 20.0) / floor_rms;
        out.iter_mut().zip(&floor).for_each(|(o, f)| *o += g * f);
    }
    let total = rms(&out);
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    out
}

/// Unit-RMS pink noise (Kellet's filter over uniform white noise).
pub fn pink_noise(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut b = [0.0_f64; 7];
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let w: f64 = rng.gen_range(-1.0..1.0);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        out.push(b.iter().sum::<f64>() + w * 0.5362);
        b[6] = w * 0.115926;
    }
    let r = rms(&out);
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v /= r);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: usize,
    /// Sample range within the session.
    pub start: usize,
    pub end: usize,
    pub gain_db: f64,
    pub hot_spot: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionTruth {
    pub spec: SessionSpec,
    pub mixture: Vec<f64>,
    /// One reference per speaker id, zero outside its utterances.
    pub references: Vec<Vec<f64>>,
    pub noise: Vec<f64>,
    pub utterances: Vec<Utterance>,
    /// Half-open sample intervals per speaker.
    pub activity: Vec<Vec<(usize, usize)>>,
    pub realized_overlap: f64,
    pub snr_db: f64,
}

/// The truth file written next to the audio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSummary {
    pub name: String,
    pub condition: String,
    pub sample_rate: u32,
    pub samples: usize,
    pub num_speakers: usize,
    pub requested_overlap: f64,
    pub realized_overlap: f64,
    pub snr_db: f64,
    pub utterances: Vec<Utterance>,
    pub activity: Vec<Vec<(usize, usize)>>,
}

impl SessionTruth {
    pub fn summary(&self) -> TruthSummary {
        TruthSummary {
            name: self.spec.name.clone(),
            condition: self.spec.condition(),
            sample_rate: self.spec.sample_rate,
            samples: self.mixture.len(),
            num_speakers: self.spec.num_speakers,
            requested_overlap: self.spec.overlap_ratio,
            realized_overlap: self.realized_overlap,
            snr_db: self.snr_db,
            utterances: self.utterances.clone(),
            activity: self.activity.clone(),
        }
    }

    /// Writes `mixture.wav`, `ref_<k>.wav`, `noise.wav` and `truth.json`.
    pub fn write_artifacts(&self, dir: &Path, format: WavFormat) -> Result<()> {
        fs::create_dir_all(dir)?;
        let sr = self.spec.sample_rate;
        write_wav(dir.join("mixture.wav"), &self.mixture, sr, format)?;
        for (k, r) in self.references.iter().enumerate() {
            write_wav(dir.join(format!("ref_{k}.wav")), r, sr, format)?;
        }
        write_wav(dir.join("noise.wav"), &self.noise, sr, format)?;
        let json = serde_json::to_string_pretty(&self.summary()).map_err(std::io::Error::from)?;
        fs::write(dir.join("truth.json"), json + "\n")?;
        Ok(())
    }
}

/// Overlapped time over speech time for sample intervals.
pub fn overlap_ratio(activity: &[Vec<(usize, usize)>], len: usize) -> f64 {
    let mut count = vec![0i32; len + 1];
    for &(s, e) in activity.iter().flatten() {
        count[s.min(len)] += 1;
        count[e.min(len)] -= 1;
    }
    let (mut active, mut speech, mut overlapped) = (0i32, 0usize, 0usize);
    for c in &count[..len] {
        active += c;
        speech += usize::from(active >= 1);
        overlapped += usize::from(active >= 2);
    }
    if speech == 0 {
        0.0
    } else {
        overlapped as f64 / speech as f64
    }
}

/// Seconds-level placement before gains and audio.
struct Placed {
    speaker: usize,
    start: f64,
    len: f64,
    hot_spot: bool,
}

fn layout(spec: &SessionSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let r = spec.overlap_ratio;
    let h = spec.hot_spot_count;
    let avail = spec.duration - 2.0 * EDGE_SILENCE;
    let hot_lens: Vec<f64> = HOT_STARTS.iter().map(|s| HOT_SPAN - s).collect();
    let hot_union = h as f64 * HOT_SPAN;
    let hot_overlapped = h as f64 * (HOT_SPAN - HOT_STARTS[1]);
    let hot_total = h as f64 * (HOT_SPAN + 2.0 * HOT_GAP);

    // Utterance lengths scaled by s must satisfy
    //   s·ΣL/(1+r) + gaps + hot_total − (r·hot_union − hot_overlapped)/(1+r) = avail.
    let (lo, hi) = (spec.utterance_len[0], spec.utterance_len[1]);
    let (gap_lo, gap_hi) = spec.silence.range();
    let mut lens: Vec<f64> = Vec::new();
    let mut gaps: Vec<f64> = Vec::new();
    let budget =
        |gaps: &[f64]| avail - hot_total - gaps.iter().sum::<f64>() + (r * hot_union - hot_overlapped) / (1.0 + r);
    loop {
        let have = lens.iter().sum::<f64>() / (1.0 + r);
        if lens.len() > h && have >= budget(&gaps) {
            break;
        }
        if budget(&gaps) <= 0.0 && lens.len() > h {
            break;
        }
        if !lens.is_empty() && r == 0.0 {
            gaps.push(rng.gen_range(gap_lo..=gap_hi));
        }
        lens.push(rng.gen_range(lo..=hi));
    }
    let target = budget(&gaps);
    if target <= 0.0 {
        return Err(Error::param(
            "duration",
            format!("{} s cannot hold the requested hot spots and silences", spec.duration),
        ));
    }
    let scale = target / (lens.iter().sum::<f64>() / (1.0 + r));
    lens.iter_mut().for_each(|l| *l *= scale);

    let n = lens.len();
    let chunk_of = |i: usize| i * (h + 1) / n;
    let open: Vec<bool> = (0..n.saturating_sub(1))
        .map(|i| chunk_of(i) == chunk_of(i + 1))
        .collect();
    let caps: Vec<f64> = (0..open.len())
        .map(|i| {
            if open[i] {
                MAX_JUNCTION_SHARE * lens[i].min(lens[i + 1])
            } else {
                0.0
            }
        })
        .collect();
    let total_len: f64 = lens.iter().sum();
    let cap_sum: f64 = caps.iter().sum();
    let wanted = (r * (total_len + hot_union) - hot_overlapped) / (1.0 + r);
    let min = hot_overlapped / (total_len + hot_union);
    let max = (cap_sum + hot_overlapped) / (total_len - cap_sum + hot_union);
    if wanted < -1e-12 || wanted > cap_sum + 1e-12 {
        return Err(Error::InfeasibleOverlap { requested: r, min, max });
    }
    let overlaps: Vec<f64> = caps
        .iter()
        .map(|c| {
            if cap_sum > 0.0 {
                c * wanted.max(0.0) / cap_sum
            } else {
                0.0
            }
        })
        .collect();

    let mut placed = Vec::with_capacity(n + 3 * h);
    let mut t = EDGE_SILENCE;
    let mut gap_iter = gaps.into_iter();
    for i in 0..n {
        placed.push(Placed {
            speaker: i % spec.num_speakers,
            start: t,
            len: lens[i],
            hot_spot: false,
        });
        let end = t + lens[i];
        if i + 1 == n {
            break;
        }
        let gap = if r == 0.0 { gap_iter.next().unwrap_or(0.0) } else { 0.0 };
        if open[i] {
            t = end - overlaps[i] + gap;
        } else {
            t = end + HOT_GAP;
            for (spk, (s, l)) in HOT_STARTS.iter().zip(&hot_lens).enumerate() {
                placed.push(Placed {
                    speaker: spk,
                    start: t + s,
                    len: *l,
                    hot_spot: true,
                });
            }
            t += HOT_SPAN + HOT_GAP + gap;
        }
    }
    Ok(placed)
}

/// Builds a session from its spec. Pure in `spec`.
pub fn mix_session(spec: &SessionSpec) -> Result<SessionTruth> {
    spec.validate()?;
    let sr = f64::from(spec.sample_rate);
    let total = (spec.duration * sr).round() as usize;
    let placed = layout(spec, &mut substream(spec.seed, "layout"))?;

    let mut gains = substream(spec.seed, "gains");
    let mut seeds = substream(spec.seed, "utterances");
    let mut references = vec![vec![0.0; total]; spec.num_speakers];
    let mut activity = vec![Vec::new(); spec.num_speakers];
    let mut utterances = Vec::with_capacity(placed.len());
    for p in &placed {
        let gain_db = gains.gen_range(spec.speaker_gain_db[0]..=spec.speaker_gain_db[1]);
        let start = ((p.start * sr).round() as usize).min(total);
        let end = (((p.start + p.len) * sr).round() as usize).min(total);
        let audio = gen_source(seeds.next_u64(), (end - start) as f64 / sr, p.speaker, spec.sample_rate);
        let g = 10f64.powf(gain_db / 20.0);
        for (dst, a) in references[p.speaker][start..end].iter_mut().zip(&audio) {
            *dst += g * a;
        }
        if end > start {
            activity[p.speaker].push((start, end));
        }
        utterances.push(Utterance {
            speaker: p.speaker,
            start,
            end,
            gain_db,
            hot_spot: p.hot_spot,
        });
    }

    let speech: Vec<f64> = (0..total).map(|n| references.iter().map(|r| r[n]).sum()).collect();
    let mut count = vec![0i32; total + 1];
    for &(s, e) in activity.iter().flatten() {
        count[s] += 1;
        count[e] -= 1;
    }
    let (mut active, mut power, mut active_len) = (0i32, 0.0, 0usize);
    for (c, v) in count[..total].iter().zip(&speech) {
        active += c;
        if active > 0 {
            power += v * v;
            active_len += 1;
        }
    }
    let power = if active_len > 0 { power / active_len as f64 } else { 0.0 };
    let snr_db = substream(spec.seed, "snr").gen_range(spec.noise_snr_db[0]..=spec.noise_snr_db[1]);
    let noise_gain = if power > 0.0 {
        (power / 10f64.powf(snr_db / 10.0)).sqrt()
    } else {
        0.0
    };
    let noise: Vec<f64> = pink_noise(&mut substream(spec.seed, "noise"), total)
        .into_iter()
        .map(|v| v * noise_gain)
        .collect();
    let mixture = speech.iter().zip(&noise).map(|(s, n)| s + n).collect();

    Ok(SessionTruth {
        spec: spec.clone(),
        mixture,
        realized_overlap: overlap_ratio(&activity, total),
        references,
        noise,
        utterances,
        activity,
        snr_db,
    })
}

/// Session in which every speaker talks for the whole duration, speaker `k`
/// at `gains_db[k]`, with pink noise at `snr_db` below the speech power.
/// No edge silence; useful for block-level fixtures with known activity.
pub fn concurrent_session(
    seed: u64,
    duration: f64,
    gains_db: &[f64],
    snr_db: f64,
    sample_rate: u32,
) -> Result<SessionTruth> {
    if gains_db.is_empty() || gains_db.len() > 3 {
        return Err(Error::param("gains_db", "one to three speakers"));
    }
    let spec = SessionSpec {
        name: "concurrent".into(),
        seed,
        duration,
        num_speakers: gains_db.len(),
        overlap_ratio: if gains_db.len() > 1 { 1.0 } else { 0.0 },
        speaker_gain_db: [
            gains_db.iter().copied().fold(f64::INFINITY, f64::min),
            gains_db.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ],
        noise_snr_db: [snr_db, snr_db],
        sample_rate,
        ..SessionSpec::default()
    };
    let total = (duration * f64::from(sample_rate)).round() as usize;
    let mut seeds = substream(seed, "utterances");
    let references: Vec<Vec<f64>> = gains_db
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let gain = 10f64.powf(g / 20.0);
            gen_source(seeds.next_u64(), duration, k, sample_rate)
                .into_iter()
                .map(|v| gain * v)
                .collect()
        })
        .collect();
    let speech: Vec<f64> = (0..total).map(|n| references.iter().map(|r| r[n]).sum()).collect();
    let power = speech.iter().map(|v| v * v).sum::<f64>() / total.max(1) as f64;
    let noise_gain = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise: Vec<f64> = pink_noise(&mut substream(seed, "noise"), total)
        .into_iter()
        .map(|v| v * noise_gain)
        .collect();
    let mixture = speech.iter().zip(&noise).map(|(s, n)| s + n).collect();
    let activity: Vec<Vec<(usize, usize)>> = vec![vec![(0, total)]; gains_db.len()];
    let utterances = gains_db
        .iter()
        .enumerate()
        .map(|(k, &gain_db)| Utterance {
            speaker: k,
            start: 0,
            end: total,
            gain_db,
            hot_spot: false,
        })
        .collect();
    Ok(SessionTruth {
        realized_overlap: overlap_ratio(&activity, total),
        spec,
        mixture,
        references,
        noise,
        utterances,
        activity,
        snr_db,
    })
}

/// Magnitude spectrograms of a session's mixture and ground truth, used to
/// build per-block oracle contexts.
#[derive(Clone, Debug)]
pub struct SessionSpectra {
    mixture: MagnitudeSpectrogram,
    sources: Vec<MagnitudeSpectrogram>,
    noise: MagnitudeSpectrogram,
    activity_threshold: f64,
}

impl SessionSpectra {
    pub fn new(truth: &SessionTruth, stft: &StftConfig, activity_threshold: f64) -> Result<Self> {
        let mag = |x: &[f64]| analyze(x, stft).map(|(s, _)| magnitude(&s));
        Ok(Self {
            mixture: mag(&truth.mixture)?,
            sources: truth.references.iter().map(|r| mag(r)).collect::<Result<_>>()?,
            noise: mag(&truth.noise)?,
            activity_threshold,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.mixture.shape().0
    }

    /// Share of the block's mixture energy carried by each source.
    pub fn energy_fractions(&self, block: &BlockRange) -> Vec<f64> {
        let total = self.mixture.window(block.start, block.len).energy();
        self.sources
            .iter()
            .map(|s| {
                if total > 0.0 {
                    s.window(block.start, block.len).energy() / total
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Sources whose energy fraction reaches the activity threshold.
    pub fn active_count(&self, block: &BlockRange) -> usize {
        self.energy_fractions(block)
            .iter()
            .filter(|&&f| f >= self.activity_threshold)
            .count()
    }

    pub fn block_context(&self, block: &BlockRange) -> Result<OracleContext> {
        let fractions = self.energy_fractions(block);
        let sources = self
            .sources
            .iter()
            .zip(fractions)
            .enumerate()
            .map(|(id, (s, f))| SourceRef {
                id,
                magnitude: s.window(block.start, block.len).into_inner(),
                active: f >= self.activity_threshold,
            })
            .collect();
        OracleContext::new(sources, self.noise.window(block.start, block.len).into_inner())
    }
}

impl ContextProvider for SessionSpectra {
    fn context(&self, block: &BlockRange) -> Result<Option<OracleContext>> {
        self.block_context(block).map(Some)
    }
}

/// Oracle context for one block, computing the session spectra on the way.
/// Prefer [`SessionSpectra`] when several blocks are needed.
pub fn truth_block_context(truth: &SessionTruth, block: &BlockRange, stft: &StftConfig) -> Result<OracleContext> {
    SessionSpectra::new(truth, stft, DEFAULT_ACTIVITY_THRESHOLD)?.block_context(block)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sources_are_deterministic_and_unit_rms() {
        let a = gen_source(3, 1.0, 1, 16_000);
        assert_eq!(a, gen_source(3, 1.0, 1, 16_000));
        assert_ne!(a, gen_source(4, 1.0, 1, 16_000));
        assert!((rms(&a) - 1.0).abs() < 1e-6);
        assert_eq!(a.len(), 16_000);
    }

    #[test]
    fn fundamentals_are_distinct() {
        for i in 0..22 {
            for j in 0..i {
                assert!((fundamental(i) - fundamental(j)).abs() >= 10.0);
            }
            assert!((90.0..=300.0).contains(&fundamental(i)));
        }
    }

    #[test]
    fn single_speaker_is_additive() {
        let spec = SessionSpec {
            num_speakers: 1,
            overlap_ratio: 0.0,
            duration: 10.0,
            ..Default::default()
        };
        let t = mix_session(&spec).unwrap();
        for n in 0..t.mixture.len() {
            assert_eq!(t.mixture[n], t.references[0][n] + t.noise[n]);
        }
        assert_eq!(t.realized_overlap, 0.0);
    }

    #[test]
    fn requested_overlap_is_realized() {
        for r in [0.1, 0.2, 0.3, 0.4] {
            let t = mix_session(&SessionSpec {
                overlap_ratio: r,
                ..Default::default()
            })
            .unwrap();
            assert!((t.realized_overlap - r).abs() <= 0.02, "{r}: {}", t.realized_overlap);
            assert_eq!(t.mixture.len(), 960_000);
        }
    }

    #[test]
    fn hot_spot_has_three_concurrent_speakers() {
        let t = mix_session(&SessionSpec {
            num_speakers: 3,
            hot_spot_count: 1,
            overlap_ratio: 0.3,
            ..Default::default()
        })
        .unwrap();
        let hot: Vec<&Utterance> = t.utterances.iter().filter(|u| u.hot_spot).collect();
        assert_eq!(hot.len(), 3);
        let lo = hot.iter().map(|u| u.start).max().unwrap();
        let hi = hot.iter().map(|u| u.end).min().unwrap();
        assert!(hi > lo);
        assert!((t.realized_overlap - 0.3).abs() <= 0.02);
    }

    #[test]
    fn infeasible_requests() {
        let one = SessionSpec {
            num_speakers: 1,
            overlap_ratio: 0.2,
            ..Default::default()
        };
        assert!(matches!(mix_session(&one), Err(Error::InfeasibleOverlap { .. })));
        let hot_without_overlap = SessionSpec {
            num_speakers: 3,
            hot_spot_count: 1,
            overlap_ratio: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            mix_session(&hot_without_overlap),
            Err(Error::InfeasibleOverlap { .. })
        ));
        let too_much = SessionSpec {
            overlap_ratio: 1.0,
            ..Default::default()
        };
        match mix_session(&too_much) {
            Err(Error::InfeasibleOverlap { max, .. }) => assert!(max < 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn substreams_are_independent() {
        let a = substream(1, "noise").next_u64();
        let b = substream(1, "gains").next_u64();
        assert_ne!(a, b);
        assert_eq!(a, substream(1, "noise").next_u64());
    }
}
