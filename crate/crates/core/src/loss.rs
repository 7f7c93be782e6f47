//! Training objective for recursive separation: a permutation-searched
//! masked-magnitude MSE plus a stop-flag cross-entropy, and the
//! fixed-channel (uPIT) variant used by the baseline.

use itertools::Itertools;
use ndarray::{Array2, Zip};
use serde::Serialize;

use crate::error::{check_shape, Error, Result};
use crate::spectral::{MagnitudeSpectrogram, Mask};

/// Weight of the flag term in the total loss.
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Flags are clamped to `[FLAG_EPSILON, 1 - FLAG_EPSILON]` before the logs.
pub const FLAG_EPSILON: f64 = 1e-7;
/// Largest source count for the factorial permutation search.
pub const MAX_PERMUTATION_SEARCH: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mse: f64,
    pub flag: f64,
    pub total: f64,
    /// `best_permutation[i]` is the reference matched to estimate `i`.
    pub best_permutation: Vec<usize>,
}

/// Flag targets for `S` extracted sources: `S - 1` zeros then a one.
#[derive(Clone, Debug, PartialEq)]
pub struct FlagTarget(Vec<f64>);

impl FlagTarget {
    pub fn for_sources(num_sources: usize) -> Self {
        let mut z = vec![0.0; num_sources];
        if let Some(last) = z.last_mut() {
            *last = 1.0;
        }
        Self(z)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskGradients {
    pub speakers: Vec<Array2<f64>>,
    pub noise: Array2<f64>,
}

fn check_inputs(
    est_spk: &[Mask],
    est_noise: &Mask,
    mixture: &MagnitudeSpectrogram,
    refs: &[MagnitudeSpectrogram],
    noise_ref: &MagnitudeSpectrogram,
) -> Result<()> {
    let shape = mixture.shape();
    if est_spk.len() != refs.len() {
        return Err(Error::CardinalityMismatch {
            context: "speaker masks vs references",
            expected: refs.len(),
            actual: est_spk.len(),
        });
    }
    for m in est_spk {
        check_shape("speaker mask", shape, m.shape())?;
    }
    for r in refs {
        check_shape("reference", shape, r.shape())?;
    }
    check_shape("noise mask", shape, est_noise.shape())?;
    check_shape("noise reference", shape, noise_ref.shape())
}

fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    let ok = perm.len() == n && perm.iter().all(|&p| p < n && !std::mem::replace(&mut seen[p], true));
    if ok {
        Ok(())
    } else {
        Err(Error::param(
            "permutation",
            format!("{perm:?} is not a permutation of 0..{n}"),
        ))
    }
}

/// ‖mask ⊙ Y − target‖².
fn masked_sq_error(mask: &Mask, mixture: &Array2<f64>, target: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(mask.data()).and(mixture).and(target).for_each(|&m, &y, &a| {
        let d = m * y - a;
        acc += d * d;
    });
    acc
}

fn zero_error(mask: &Mask, mixture: &Array2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(mask.data()).and(mixture).for_each(|&m, &y| {
        acc += m * m * y * y;
    });
    acc
}

/// `cost[i][j]` = squared error of estimate `i` against reference `j`
/// (`None` references are silent).
fn pairwise_costs(
    est_spk: &[Mask],
    mixture: &MagnitudeSpectrogram,
    refs: &[Option<&MagnitudeSpectrogram>],
) -> Vec<Vec<f64>> {
    est_spk
        .iter()
        .map(|m| {
            refs.iter()
                .map(|r| match r {
                    Some(r) => masked_sq_error(m, mixture.data(), r.data()),
                    None => zero_error(m, mixture.data()),
                })
                .collect()
        })
        .collect()
}

fn search(costs: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let n = costs.len();
    if n > MAX_PERMUTATION_SEARCH {
        return Err(Error::PermutationSearchTooLarge {
            size: n,
            bound: MAX_PERMUTATION_SEARCH,
        });
    }
    let mut best = ((0..n).collect::<Vec<_>>(), f64::INFINITY);
    for perm in (0..n).permutations(n) {
        let cost: f64 = perm.iter().enumerate().map(|(i, &j)| costs[i][j]).sum();
        if cost < best.1 {
            best = (perm, cost);
        }
    }
    if n == 0 {
        best.1 = 0.0;
    }
    Ok(best)
}

fn normalizer(mixture: &MagnitudeSpectrogram) -> f64 {
    let (t, f) = mixture.shape();
    (t * f) as f64
}

/// `(1/STF) Σ_i ‖M_i ⊙ Y − A_perm(i)‖² + (1/TF) ‖M_N ⊙ Y − N‖²`.
pub fn mse_loss(
    est_spk: &[Mask],
    est_noise: &Mask,
    mixture: &MagnitudeSpectrogram,
    refs: &[MagnitudeSpectrogram],
    noise_ref: &MagnitudeSpectrogram,
    perm: &[usize],
) -> Result<f64> {
    check_inputs(est_spk, est_noise, mixture, refs, noise_ref)?;
    check_permutation(perm, refs.len())?;
    let tf = normalizer(mixture);
    let speaker: f64 = est_spk
        .iter()
        .zip(perm)
        .map(|(m, &j)| masked_sq_error(m, mixture.data(), refs[j].data()))
        .sum();
    let speaker = if refs.is_empty() {
        0.0
    } else {
        speaker / (refs.len() as f64 * tf)
    };
    Ok(speaker + masked_sq_error(est_noise, mixture.data(), noise_ref.data()) / tf)
}

/// Exhaustive search over all `S!` assignments of the speaker term only.
/// Ties keep the lexicographically first permutation.
pub fn best_permutation(
    est_spk: &[Mask],
    mixture: &MagnitudeSpectrogram,
    refs: &[MagnitudeSpectrogram],
) -> Result<Vec<usize>> {
    if est_spk.len() != refs.len() {
        return Err(Error::CardinalityMismatch {
            context: "speaker masks vs references",
            expected: refs.len(),
            actual: est_spk.len(),
        });
    }
    if refs.len() > MAX_PERMUTATION_SEARCH {
        return Err(Error::PermutationSearchTooLarge {
            size: refs.len(),
            bound: MAX_PERMUTATION_SEARCH,
        });
    }
    for m in est_spk {
        check_shape("speaker mask", mixture.shape(), m.shape())?;
    }
    let refs: Vec<_> = refs.iter().map(Some).collect();
    Ok(search(&pairwise_costs(est_spk, mixture, &refs))?.0)
}

/// Summed binary cross-entropy of the stop flags.
pub fn flag_loss(est_flags: &[f64], target: &FlagTarget) -> Result<f64> {
    if est_flags.len() != target.0.len() {
        return Err(Error::CardinalityMismatch {
            context: "flags vs flag target",
            expected: target.0.len(),
            actual: est_flags.len(),
        });
    }
    Ok(est_flags
        .iter()
        .zip(&target.0)
        .map(|(&zh, &z)| {
            let zh = zh.clamp(FLAG_EPSILON, 1.0 - FLAG_EPSILON);
            -(z * zh.ln() + (1.0 - z) * (1.0 - zh).ln())
        })
        .sum())
}

/// Derivative of [`flag_loss`] with respect to each estimated flag (zero
/// where the flag is clamped).
pub fn flag_loss_grad(est_flags: &[f64], target: &FlagTarget) -> Result<Vec<f64>> {
    if est_flags.len() != target.0.len() {
        return Err(Error::CardinalityMismatch {
            context: "flags vs flag target",
            expected: target.0.len(),
            actual: est_flags.len(),
        });
    }
    Ok(est_flags
        .iter()
        .zip(&target.0)
        .map(|(&zh, &z)| {
            if (FLAG_EPSILON..=1.0 - FLAG_EPSILON).contains(&zh) {
                -z / zh + (1.0 - z) / (1.0 - zh)
            } else {
                0.0
            }
        })
        .collect())
}

/// Inputs of the recursive training objective for one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub est_spk: &'a [Mask],
    pub est_noise: &'a Mask,
    pub est_flags: &'a [f64],
    pub mixture: &'a MagnitudeSpectrogram,
    pub refs: &'a [MagnitudeSpectrogram],
    pub noise_ref: &'a MagnitudeSpectrogram,
}

/// `mse + alpha * flag` at the best permutation.
pub fn total_loss(inputs: &LossInputs<'_>, alpha: f64) -> Result<LossBreakdown> {
    let perm = best_permutation(inputs.est_spk, inputs.mixture, inputs.refs)?;
    let mse = mse_loss(
        inputs.est_spk,
        inputs.est_noise,
        inputs.mixture,
        inputs.refs,
        inputs.noise_ref,
        &perm,
    )?;
    let flag = flag_loss(inputs.est_flags, &FlagTarget::for_sources(inputs.refs.len()))?;
    Ok(LossBreakdown {
        mse,
        flag,
        total: mse + alpha * flag,
        best_permutation: perm,
    })
}

/// Fixed-channel objective: references are zero-padded to the number of
/// estimated channels and the best of the `C!` assignments is taken.
/// Returns the loss and the winning permutation.
pub fn upit_loss(
    est_spk: &[Mask],
    est_noise: &Mask,
    mixture: &MagnitudeSpectrogram,
    refs: &[MagnitudeSpectrogram],
    noise_ref: &MagnitudeSpectrogram,
) -> Result<(f64, Vec<usize>)> {
    let channels = est_spk.len();
    if refs.len() > channels || channels == 0 {
        return Err(Error::CardinalityMismatch {
            context: "uPIT references vs channels",
            expected: channels,
            actual: refs.len(),
        });
    }
    let shape = mixture.shape();
    for m in est_spk {
        check_shape("speaker mask", shape, m.shape())?;
    }
    for r in refs {
        check_shape("reference", shape, r.shape())?;
    }
    check_shape("noise mask", shape, est_noise.shape())?;
    check_shape("noise reference", shape, noise_ref.shape())?;

    let padded: Vec<Option<&MagnitudeSpectrogram>> = refs
        .iter()
        .map(Some)
        .chain(std::iter::repeat(None))
        .take(channels)
        .collect();
    let (perm, cost) = search(&pairwise_costs(est_spk, mixture, &padded))?;
    let tf = normalizer(mixture);
    let noise = masked_sq_error(est_noise, mixture.data(), noise_ref.data()) / tf;
    Ok((cost / (channels as f64 * tf) + noise, perm))
}

/// Analytic gradient of [`mse_loss`] with respect to every mask entry at a
/// fixed permutation: `(2/STF)(M_i ⊙ Y − A)⊙Y` and `(2/TF)(M_N ⊙ Y − N)⊙Y`.
pub fn mse_loss_grad_masks(
    est_spk: &[Mask],
    est_noise: &Mask,
    mixture: &MagnitudeSpectrogram,
    refs: &[MagnitudeSpectrogram],
    noise_ref: &MagnitudeSpectrogram,
    perm: &[usize],
) -> Result<MaskGradients> {
    check_inputs(est_spk, est_noise, mixture, refs, noise_ref)?;
    check_permutation(perm, refs.len())?;
    let tf = normalizer(mixture);
    let grad = |mask: &Mask, target: &Array2<f64>, scale: f64| {
        let mut g = Array2::zeros(mixture.shape());
        Zip::from(&mut g)
            .and(mask.data())
            .and(mixture.data())
            .and(target)
            .for_each(|g, &m, &y, &a| *g = scale * (m * y - a) * y);
        g
    };
    let spk_scale = 2.0 / (refs.len().max(1) as f64 * tf);
    Ok(MaskGradients {
        speakers: est_spk
            .iter()
            .zip(perm)
            .map(|(m, &j)| grad(m, refs[j].data(), spk_scale))
            .collect(),
        noise: grad(est_noise, noise_ref.data(), 2.0 / tf),
    })
}
