//! Separation quality measures against simulator ground truth.

use std::collections::BTreeMap;
use std::io::Write;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::css::{channel_switches, BlockLog};
use crate::error::{Error, Result};
use crate::simulator::{SessionTruth, Utterance};

/// Reporting ceiling and floor for SI-SNR, dB.
pub const SI_SNR_CAP: f64 = 60.0;
/// Reporting floor for leakage, dB.
pub const LEAKAGE_FLOOR: f64 = -80.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SNR in dB, clamped to ±60. `None` when the reference is
/// silent.
pub fn si_snr(est: &[f64], reference: &[f64]) -> Result<Option<f64>> {
    if est.len() != reference.len() {
        return Err(Error::CardinalityMismatch {
            context: "si_snr length",
            expected: reference.len(),
            actual: est.len(),
        });
    }
    let ref_energy = dot(reference, reference);
    if ref_energy <= 0.0 {
        return Ok(None);
    }
    let scale = dot(est, reference) / ref_energy;
    let (mut target, mut error) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = scale * r;
        target += t * t;
        error += (e - t) * (e - t);
    }
    let db = if target <= 0.0 {
        -SI_SNR_CAP
    } else if error <= 0.0 {
        SI_SNR_CAP
    } else {
        10.0 * (target / error).log10()
    };
    Ok(Some(db.clamp(-SI_SNR_CAP, SI_SNR_CAP)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PitScore {
    pub mean: f64,
    /// Channel assigned to each reference; `None` for silent references.
    pub assignment: Vec<Option<usize>>,
    /// SI-SNR of each reference on its channel.
    pub per_reference: Vec<Option<f64>>,
}

/// Best injective reference-to-channel assignment by mean SI-SNR. Silent
/// references are left out; `None` when every reference is silent.
pub fn pit_si_snr(channels: &[Vec<f64>], references: &[Vec<f64>]) -> Result<Option<PitScore>> {
    let scored: Vec<usize> = references
        .iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|&v| v != 0.0))
        .map(|(i, _)| i)
        .collect();
    if scored.len() > channels.len() {
        return Err(Error::CardinalityMismatch {
            context: "pit_si_snr references vs channels",
            expected: channels.len(),
            actual: scored.len(),
        });
    }
    if scored.is_empty() {
        return Ok(None);
    }
    let mut table = vec![vec![0.0; channels.len()]; references.len()];
    for &r in &scored {
        for (c, ch) in channels.iter().enumerate() {
            table[r][c] = si_snr(ch, &references[r])?.expect("non-silent reference");
        }
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for chans in (0..channels.len()).permutations(scored.len()) {
        let mean = scored.iter().zip(&chans).map(|(&r, &c)| table[r][c]).sum::<f64>() / scored.len() as f64;
        if best.as_ref().map_or(true, |(b, _)| mean > *b) {
            best = Some((mean, chans));
        }
    }
    let (mean, chans) = best.expect("at least one assignment");
    let mut assignment = vec![None; references.len()];
    let mut per_reference = vec![None; references.len()];
    for (&r, &c) in scored.iter().zip(&chans) {
        assignment[r] = Some(c);
        per_reference[r] = Some(table[r][c]);
    }
    Ok(Some(PitScore {
        mean,
        assignment,
        per_reference,
    }))
}

/// Mean over utterances of the best channel's SI-SNR within the utterance
/// span. A CSS channel carries different speakers over time, so this is
/// the fairer view when speakers take turns on a channel. `None` when no
/// utterance has a non-silent reference.
pub fn utterance_si_snr(
    channels: &[Vec<f64>],
    references: &[Vec<f64>],
    utterances: &[Utterance],
) -> Result<Option<f64>> {
    let mut scores = Vec::new();
    for u in utterances {
        let reference = references.get(u.speaker).ok_or(Error::CardinalityMismatch {
            context: "utterance speaker",
            expected: references.len(),
            actual: u.speaker + 1,
        })?;
        let span = u.start..u.end.min(reference.len());
        let mut best: Option<f64> = None;
        for ch in channels {
            if let Some(v) = si_snr(&ch[span.clone()], &reference[span.clone()])? {
                best = Some(best.map_or(v, |b| b.max(v)));
            }
        }
        scores.extend(best);
    }
    Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
}

/// Sample ranges where exactly one speaker is active, shrunk by `guard`
/// samples at both ends. Returns `(speaker, start, end)`.
pub fn single_speaker_regions(
    activity: &[Vec<(usize, usize)>],
    len: usize,
    guard: usize,
) -> Vec<(usize, usize, usize)> {
    let mut owner: Vec<Option<usize>> = vec![None; len];
    let mut count = vec![0u8; len];
    for (spk, intervals) in activity.iter().enumerate() {
        for &(s, e) in intervals {
            for n in s.min(len)..e.min(len) {
                count[n] = count[n].saturating_add(1);
                owner[n] = Some(spk);
            }
        }
    }
    let mut regions = Vec::new();
    let mut n = 0;
    while n < len {
        if count[n] != 1 {
            n += 1;
            continue;
        }
        let spk = owner[n].expect("counted sample has an owner");
        let start = n;
        while n < len && count[n] == 1 && owner[n] == Some(spk) {
            n += 1;
        }
        if n - start > 2 * guard {
            regions.push((spk, start + guard, n - guard));
        }
    }
    regions
}

/// Mean energy of the channels that should be silent relative to the active
/// speaker's channel over single-speaker regions, in dB (floored at −80).
/// `assignment[speaker]` is the speaker's channel. `None` when no region is
/// usable.
pub fn leakage(
    channels: &[Vec<f64>],
    activity: &[Vec<(usize, usize)>],
    assignment: &[Option<usize>],
    guard: usize,
) -> Result<Option<f64>> {
    let len = channels.first().map_or(0, Vec::len);
    if channels.iter().any(|c| c.len() != len) {
        return Err(Error::param("channels", "channels differ in length"));
    }
    let mut ratios = Vec::new();
    for (spk, s, e) in single_speaker_regions(activity, len, guard) {
        let Some(active) = assignment.get(spk).copied().flatten() else {
            continue;
        };
        let energy = |c: usize| channels[c][s..e].iter().map(|v| v * v).sum::<f64>();
        let reference = energy(active);
        if reference <= 0.0 {
            continue;
        }
        for c in (0..channels.len()).filter(|&c| c != active) {
            ratios.push(energy(c) / reference);
        }
    }
    if ratios.is_empty() {
        return Ok(None);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok(Some(if mean > 0.0 {
        (10.0 * mean.log10()).max(LEAKAGE_FLOOR)
    } else {
        LEAKAGE_FLOOR
    }))
}

/// Fraction of blocks whose accepted iteration count equals the true number
/// of active sources. `None` for separators that do not count.
pub fn counting_accuracy(blocks: &[BlockLog], truth: &[usize]) -> Result<Option<f64>> {
    if blocks.len() != truth.len() {
        return Err(Error::CardinalityMismatch {
            context: "counting truth",
            expected: blocks.len(),
            actual: truth.len(),
        });
    }
    if blocks.is_empty() || blocks.iter().any(|b| b.iterations.is_none()) {
        return Ok(None);
    }
    let hits = blocks
        .iter()
        .zip(truth)
        .filter(|(b, &t)| b.iterations == Some(t))
        .count();
    Ok(Some(hits as f64 / blocks.len() as f64))
}

/// One evaluated session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: String,
    pub condition: String,
    pub si_snr: f64,
    pub si_snr_mixture: f64,
    pub si_snri: f64,
    pub si_snr_utterance: Option<f64>,
    pub leakage_db: Option<f64>,
    pub counting_accuracy: Option<f64>,
    pub overflow_events: usize,
    pub channel_switches: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub sessions: usize,
    pub si_snr: f64,
    pub si_snri: f64,
    pub si_snr_utterance: Option<f64>,
    pub leakage_db: Option<f64>,
    pub counting_accuracy: Option<f64>,
    pub overflow_events: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: Vec<SessionReport>,
    /// Keyed by overlap condition.
    pub conditions: BTreeMap<String, ConditionSummary>,
    pub overall: ConditionSummary,
}

fn mean_of<'a>(vals: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().copied().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarize(rows: &[&SessionReport]) -> ConditionSummary {
    let n = rows.len().max(1) as f64;
    ConditionSummary {
        sessions: rows.len(),
        si_snr: rows.iter().map(|r| r.si_snr).sum::<f64>() / n,
        si_snri: rows.iter().map(|r| r.si_snri).sum::<f64>() / n,
        si_snr_utterance: mean_of(rows.iter().map(|r| &r.si_snr_utterance)),
        leakage_db: mean_of(rows.iter().map(|r| &r.leakage_db)),
        counting_accuracy: mean_of(rows.iter().map(|r| &r.counting_accuracy)),
        overflow_events: rows.iter().map(|r| r.overflow_events).sum(),
    }
}

/// Scores one separated session against its ground truth. `truth_counts`
/// holds the true active-source count of each logged block; `guard` shrinks
/// single-speaker regions for the leakage measure.
pub fn evaluate_session(
    truth: &SessionTruth,
    channels: &[Vec<f64>],
    blocks: &[BlockLog],
    truth_counts: &[usize],
    guard: usize,
) -> Result<SessionReport> {
    let pit =
        pit_si_snr(channels, &truth.references)?.ok_or_else(|| Error::param("references", "session has no speech"))?;
    let mut baseline = Vec::new();
    for (r, score) in truth.references.iter().zip(&pit.per_reference) {
        if score.is_some() {
            baseline.extend(si_snr(&truth.mixture, r)?);
        }
    }
    let si_snr_mixture = baseline.iter().sum::<f64>() / baseline.len() as f64;
    Ok(SessionReport {
        session: truth.spec.name.clone(),
        condition: truth.spec.condition(),
        si_snr: pit.mean,
        si_snr_mixture,
        si_snri: pit.mean - si_snr_mixture,
        si_snr_utterance: utterance_si_snr(channels, &truth.references, &truth.utterances)?,
        leakage_db: leakage(channels, &truth.activity, &pit.assignment, guard)?,
        counting_accuracy: counting_accuracy(blocks, truth_counts)?,
        overflow_events: blocks.iter().filter(|b| b.overflow).count(),
        channel_switches: channel_switches(blocks),
    })
}

impl EvalReport {
    pub fn new(sessions: Vec<SessionReport>) -> Self {
        let mut groups: BTreeMap<String, Vec<&SessionReport>> = BTreeMap::new();
        for s in &sessions {
            groups.entry(s.condition.clone()).or_default().push(s);
        }
        let conditions = groups.iter().map(|(k, v)| (k.clone(), summarize(v))).collect();
        let overall = summarize(&sessions.iter().collect::<Vec<_>>());
        Self {
            sessions,
            conditions,
            overall,
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.sessions {
            w.serialize(s).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut out, self).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn si_snr_examples() {
        let r = vec![1.0, -2.0, 3.0, 0.5];
        assert_eq!(si_snr(&r, &r).unwrap(), Some(60.0));
        let twice: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_snr(&twice, &r).unwrap(), Some(60.0));
        let r = vec![1.0, 1.0, 0.0, 0.0];
        let est = vec![1.0, 1.0, 1.0, -1.0];
        assert!(si_snr(&est, &r).unwrap().unwrap().abs() < 1e-12);
        assert_eq!(si_snr(&est, &[0.0; 4]).unwrap(), None);
        assert_eq!(si_snr(&[0.0; 4], &r).unwrap(), Some(-60.0));
        assert!(si_snr(&est, &[1.0; 3]).is_err());
    }

    #[test]
    fn pit_examples() {
        let a = vec![1.0, 0.0, 2.0, -1.0];
        let b = vec![0.0, 3.0, -1.0, 1.0];
        let score = pit_si_snr(&[b.clone(), a.clone()], &[a.clone(), b.clone()])
            .unwrap()
            .unwrap();
        assert_eq!(score.mean, 60.0);
        assert_eq!(score.assignment, vec![Some(1), Some(0)]);

        let noisy = vec![1.1, 0.1, 1.9, -1.0];
        let score = pit_si_snr(&[b.clone(), vec![0.0; 4], noisy.clone()], std::slice::from_ref(&a))
            .unwrap()
            .unwrap();
        assert_eq!(score.assignment, vec![Some(2)]);
        assert_eq!(score.mean, si_snr(&noisy, &a).unwrap().unwrap());

        let silent = pit_si_snr(std::slice::from_ref(&a), &[a.clone(), vec![0.0; 4]])
            .unwrap()
            .unwrap();
        assert_eq!(silent.assignment, vec![Some(0), None]);
        assert!(pit_si_snr(std::slice::from_ref(&a), &[a.clone(), b]).is_err());
    }

    #[test]
    fn leakage_floor_when_inactive_channels_are_silent() {
        let active = vec![1.0; 100];
        let channels = vec![active, vec![0.0; 100]];
        let activity = vec![vec![(0, 100)], vec![]];
        let l = leakage(&channels, &activity, &[Some(0), None], 10).unwrap();
        assert_eq!(l, Some(LEAKAGE_FLOOR));
    }

    #[test]
    fn leakage_measures_relative_energy() {
        let channels = vec![vec![1.0; 100], vec![0.1; 100]];
        let activity = vec![vec![(0, 100)], vec![]];
        let l = leakage(&channels, &activity, &[Some(0), Some(1)], 0).unwrap().unwrap();
        assert!((l + 20.0).abs() < 1e-9);
    }

    #[test]
    fn single_speaker_regions_skip_overlap_and_apply_guard() {
        let activity = vec![vec![(0, 50)], vec![(40, 100)]];
        let regions = single_speaker_regions(&activity, 100, 5);
        assert_eq!(regions, vec![(0, 5, 35), (1, 55, 95)]);
    }

    #[test]
    fn utterance_score_follows_the_speaker_across_channels() {
        let a = vec![1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 0.0, 0.0, 0.0, 2.0, 1.0, -1.0, 3.0];
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let utt = |speaker, start, end| Utterance {
            speaker,
            start,
            end,
            gain_db: 0.0,
            hot_spot: false,
        };
        let utts = [utt(0, 0, 4), utt(1, 4, 8)];
        let refs = [a.clone(), b.clone()];
        // both speakers on channel 0: whole-session PIT cannot credit b
        let channels = [mix.clone(), vec![0.0; 8]];
        assert_eq!(utterance_si_snr(&channels, &refs, &utts).unwrap(), Some(60.0));
        assert!(pit_si_snr(&channels, &refs).unwrap().unwrap().mean < 0.0);
        assert_eq!(utterance_si_snr(&channels, &refs, &[]).unwrap(), None);
    }

    fn log(iterations: Option<usize>) -> BlockLog {
        BlockLog {
            block: 0,
            frame_start: 0,
            frame_end: 1,
            current: 0..1,
            iterations,
            flags: vec![],
            stop_flag: None,
            assignment: vec![0],
            distance: 0.0,
            channel_sources: vec![None],
            overflow: false,
            dependency: false,
        }
    }

    #[test]
    fn counting_examples() {
        let blocks = vec![log(Some(0)), log(Some(0)), log(Some(0)), log(Some(0))];
        assert_eq!(counting_accuracy(&blocks, &[0, 1, 2, 0]).unwrap(), Some(0.5));
        assert_eq!(counting_accuracy(&[log(None)], &[1]).unwrap(), None);
    }
}
