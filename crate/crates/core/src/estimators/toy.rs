//! A tiny trainable estimator used to exercise the training objective end
//! to end with hand-derived gradients.
//!
//! Masks are per-frequency affine functions of `ln(1 + Y)` and the residual
//! passed through a sigmoid. The flag is a sigmoid of an affine function of
//! the residual-weighted energy fraction `Σ (R ⊙ Y)² / Σ Y²`. Training runs
//! the fixed-length recursion and backpropagates through every iteration,
//! including the clamped residual updates.

use ndarray::{Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MaskEstimator, OracleContext};
use crate::error::{check_shape, Error, Result};
use crate::loss::{flag_loss_grad, mse_loss_grad_masks, total_loss, FlagTarget, LossInputs};
use crate::rsan::{IterationResult, ResidualMask};
use crate::spectral::{MagnitudeSpectrogram, Mask};

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    pub speaker_mix: Vec<f64>,
    pub speaker_res: Vec<f64>,
    pub speaker_bias: Vec<f64>,
    pub noise_mix: Vec<f64>,
    pub noise_res: Vec<f64>,
    pub noise_bias: Vec<f64>,
    pub flag_weight: f64,
    pub flag_bias: f64,
}

impl ToyParams {
    pub fn zeros(bins: usize) -> Self {
        Self {
            speaker_mix: vec![0.0; bins],
            speaker_res: vec![0.0; bins],
            speaker_bias: vec![0.0; bins],
            noise_mix: vec![0.0; bins],
            noise_res: vec![0.0; bins],
            noise_bias: vec![0.0; bins],
            flag_weight: 0.0,
            flag_bias: 0.0,
        }
    }

    pub fn bins(&self) -> usize {
        self.speaker_bias.len()
    }

    pub fn len(&self) -> usize {
        6 * self.bins() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for part in [
            &self.speaker_mix,
            &self.speaker_res,
            &self.speaker_bias,
            &self.noise_mix,
            &self.noise_res,
            &self.noise_bias,
        ] {
            v.extend_from_slice(part);
        }
        v.push(self.flag_weight);
        v.push(self.flag_bias);
        v
    }

    pub fn from_slice(bins: usize, v: &[f64]) -> Result<Self> {
        if v.len() != 6 * bins + 2 {
            return Err(Error::CardinalityMismatch {
                context: "toy parameter vector",
                expected: 6 * bins + 2,
                actual: v.len(),
            });
        }
        let chunk = |i: usize| v[i * bins..(i + 1) * bins].to_vec();
        Ok(Self {
            speaker_mix: chunk(0),
            speaker_res: chunk(1),
            speaker_bias: chunk(2),
            noise_mix: chunk(3),
            noise_res: chunk(4),
            noise_bias: chunk(5),
            flag_weight: v[6 * bins],
            flag_bias: v[6 * bins + 1],
        })
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One training sample: mixture magnitude with its source and noise references.
#[derive(Clone, Debug)]
pub struct ToyExample {
    pub mixture: MagnitudeSpectrogram,
    pub refs: Vec<MagnitudeSpectrogram>,
    pub noise: MagnitudeSpectrogram,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss before each step, then the final loss.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEstimator {
    params: ToyParams,
}

struct Pass {
    residual: Array2<f64>,
    speaker: Array2<f64>,
    noise: Array2<f64>,
    /// R − s − n before clamping.
    updated: Array2<f64>,
    energy_fraction: f64,
    flag: f64,
}

impl ToyEstimator {
    pub fn new(params: ToyParams) -> Self {
        Self { params }
    }

    pub fn zeros(bins: usize) -> Self {
        Self::new(ToyParams::zeros(bins))
    }

    pub fn params(&self) -> &ToyParams {
        &self.params
    }

    fn features(mixture: &MagnitudeSpectrogram) -> Array2<f64> {
        mixture.data().mapv(f64::ln_1p)
    }

    fn affine(&self, x: &Array2<f64>, r: &Array2<f64>, mix: &[f64], res: &[f64], bias: &[f64]) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for ((mut o, xr), rr) in out
            .axis_iter_mut(Axis(0))
            .zip(x.axis_iter(Axis(0)))
            .zip(r.axis_iter(Axis(0)))
        {
            for f in 0..o.len() {
                o[f] = sigmoid(mix[f] * xr[f] + res[f] * rr[f] + bias[f]);
            }
        }
        out
    }

    fn energy_fraction(mixture: &MagnitudeSpectrogram, residual: &Array2<f64>) -> f64 {
        let total = mixture.energy();
        if total <= 0.0 {
            return 0.0;
        }
        let mut w = 0.0;
        Zip::from(residual)
            .and(mixture.data())
            .for_each(|&r, &y| w += (r * y) * (r * y));
        w / total
    }

    fn pass(&self, x: &Array2<f64>, mixture: &MagnitudeSpectrogram, residual: Array2<f64>) -> Pass {
        let p = &self.params;
        let speaker = self.affine(x, &residual, &p.speaker_mix, &p.speaker_res, &p.speaker_bias);
        let noise = self.affine(x, &residual, &p.noise_mix, &p.noise_res, &p.noise_bias);
        let energy_fraction = Self::energy_fraction(mixture, &residual);
        let flag = sigmoid(p.flag_weight * energy_fraction + p.flag_bias);
        let updated = &residual - &speaker - &noise;
        Pass {
            residual,
            speaker,
            noise,
            updated,
            energy_fraction,
            flag,
        }
    }

    fn check_example(&self, ex: &ToyExample) -> Result<()> {
        let (t, f) = ex.mixture.shape();
        check_shape("toy mixture bins", (t, self.params.bins()), (t, f))?;
        if ex.refs.is_empty() {
            return Err(Error::param("refs", "toy examples need at least one source"));
        }
        Ok(())
    }

    /// Fixed recursion over `refs.len()` iterations from an all-one residual.
    fn forward(&self, ex: &ToyExample) -> Result<Vec<Pass>> {
        self.check_example(ex)?;
        let x = Self::features(&ex.mixture);
        let (t, f) = ex.mixture.shape();
        let mut residual = Array2::ones((t, f));
        let mut passes = Vec::with_capacity(ex.refs.len());
        for _ in 0..ex.refs.len() {
            let pass = self.pass(&x, &ex.mixture, residual);
            residual = pass.updated.mapv(|v| v.clamp(0.0, 1.0));
            passes.push(pass);
        }
        Ok(passes)
    }

    fn example_loss(&self, ex: &ToyExample, passes: &[Pass], alpha: f64) -> Result<(f64, Vec<usize>, Array2<f64>)> {
        let masks: Vec<Mask> = passes.iter().map(|p| Mask::clamped(p.speaker.clone())).collect();
        let noise_sum = passes
            .iter()
            .fold(Array2::zeros(ex.mixture.shape()), |acc, p| acc + &p.noise);
        let noise_mask = Mask::clamped(noise_sum.clone());
        let flags: Vec<f64> = passes.iter().map(|p| p.flag).collect();
        let bd = total_loss(
            &LossInputs {
                est_spk: &masks,
                est_noise: &noise_mask,
                est_flags: &flags,
                mixture: &ex.mixture,
                refs: &ex.refs,
                noise_ref: &ex.noise,
            },
            alpha,
        )?;
        Ok((bd.total, bd.best_permutation, noise_sum))
    }

    /// Mean total loss over the examples.
    pub fn loss(&self, examples: &[ToyExample], alpha: f64) -> Result<f64> {
        let mut acc = 0.0;
        for ex in examples {
            let passes = self.forward(ex)?;
            acc += self.example_loss(ex, &passes, alpha)?.0;
        }
        Ok(acc / examples.len().max(1) as f64)
    }

    /// Mean total loss and its gradient with respect to every parameter, at
    /// the best permutation of each example.
    pub fn loss_and_grad(&self, examples: &[ToyExample], alpha: f64) -> Result<(f64, ToyParams)> {
        let bins = self.params.bins();
        let mut grad = ToyParams::zeros(bins);
        let mut total = 0.0;
        for ex in examples {
            let passes = self.forward(ex)?;
            let (loss, perm, noise_sum) = self.example_loss(ex, &passes, alpha)?;
            total += loss;
            self.backward(ex, &passes, &perm, &noise_sum, alpha, &mut grad)?;
        }
        let n = examples.len().max(1) as f64;
        let scaled = grad.to_vec().into_iter().map(|g| g / n).collect::<Vec<_>>();
        Ok((total / n, ToyParams::from_slice(bins, &scaled)?))
    }

    fn backward(
        &self,
        ex: &ToyExample,
        passes: &[Pass],
        perm: &[usize],
        noise_sum: &Array2<f64>,
        alpha: f64,
        grad: &mut ToyParams,
    ) -> Result<()> {
        let p = &self.params;
        let x = Self::features(&ex.mixture);
        let masks: Vec<Mask> = passes.iter().map(|p| Mask::clamped(p.speaker.clone())).collect();
        let noise_mask = Mask::clamped(noise_sum.clone());
        let mask_grads = mse_loss_grad_masks(&masks, &noise_mask, &ex.mixture, &ex.refs, &ex.noise, perm)?;
        let flags: Vec<f64> = passes.iter().map(|p| p.flag).collect();
        let flag_grads = flag_loss_grad(&flags, &FlagTarget::for_sources(passes.len()))?;

        // d loss / d n_k through the clamped noise sum
        let mut noise_base = mask_grads.noise.clone();
        Zip::from(&mut noise_base).and(noise_sum).for_each(|g, &s| {
            if s >= 1.0 {
                *g = 0.0
            }
        });

        let y_energy = ex.mixture.energy();
        let mut grad_next: Array2<f64> = Array2::zeros(ex.mixture.shape());
        for (k, pass) in passes.iter().enumerate().rev() {
            // residual update R_{k+1} = clamp(R_k − s_k − n_k): only the lower clamp can bind
            let mut through = grad_next.clone();
            Zip::from(&mut through).and(&pass.updated).for_each(|g, &u| {
                if u <= 0.0 {
                    *g = 0.0
                }
            });
            let mut grad_res = through.clone();
            let grad_spk = &mask_grads.speakers[k] - &through;
            let grad_noise = &noise_base - &through;

            for (g_act, act, mix_g, res_g, bias_g, res_w) in [
                (
                    &grad_spk,
                    &pass.speaker,
                    &mut grad.speaker_mix,
                    &mut grad.speaker_res,
                    &mut grad.speaker_bias,
                    &p.speaker_res,
                ),
                (
                    &grad_noise,
                    &pass.noise,
                    &mut grad.noise_mix,
                    &mut grad.noise_res,
                    &mut grad.noise_bias,
                    &p.noise_res,
                ),
            ] {
                for t in 0..act.nrows() {
                    for f in 0..act.ncols() {
                        let s = act[[t, f]];
                        let d = g_act[[t, f]] * s * (1.0 - s);
                        mix_g[f] += d * x[[t, f]];
                        res_g[f] += d * pass.residual[[t, f]];
                        bias_g[f] += d;
                        grad_res[[t, f]] += d * res_w[f];
                    }
                }
            }

            let dq = alpha * flag_grads[k] * pass.flag * (1.0 - pass.flag);
            grad.flag_weight += dq * pass.energy_fraction;
            grad.flag_bias += dq;
            if y_energy > 0.0 {
                let scale = dq * p.flag_weight * 2.0 / y_energy;
                Zip::from(&mut grad_res)
                    .and(&pass.residual)
                    .and(ex.mixture.data())
                    .for_each(|g, &r, &y| *g += scale * r * y * y);
            }
            grad_next = grad_res;
        }
        Ok(())
    }

    /// Plain gradient descent for `steps` steps.
    pub fn train(&mut self, examples: &[ToyExample], steps: usize, lr: f64, alpha: f64) -> Result<TrainReport> {
        let bins = self.params.bins();
        let mut losses = Vec::with_capacity(steps + 1);
        for step in 0..steps {
            let (loss, grad) = self.loss_and_grad(examples, alpha)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            losses.push(loss);
            let updated: Vec<f64> = self
                .params
                .to_vec()
                .iter()
                .zip(grad.to_vec())
                .map(|(w, g)| w - lr * g)
                .collect();
            self.params = ToyParams::from_slice(bins, &updated)?;
        }
        let final_loss = self.loss(examples, alpha)?;
        if !final_loss.is_finite() {
            return Err(Error::Diverged {
                step: steps,
                loss: final_loss,
            });
        }
        losses.push(final_loss);
        Ok(TrainReport {
            initial_loss: losses[0],
            final_loss,
            losses,
        })
    }
}

/// Trains a zero-initialized toy estimator sized to the dataset.
pub fn toy_train(examples: &[ToyExample], steps: usize, lr: f64, alpha: f64) -> Result<(ToyEstimator, TrainReport)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::param("examples", "dataset is empty"))?;
    let mut est = ToyEstimator::zeros(first.mixture.shape().1);
    let report = est.train(examples, steps, lr, alpha)?;
    Ok((est, report))
}

/// Synthetic magnitude dataset: source `k` lives in its own frequency band
/// and is switched on in a random 70 % of frames; uniform noise everywhere;
/// the mixture is the exact sum of magnitudes.
pub fn toy_dataset(seed: u64, examples: usize, sources: usize, frames: usize, bins: usize) -> Vec<ToyExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let band = bins / sources.max(1);
    (0..examples)
        .map(|_| {
            let refs: Vec<Array2<f64>> = (0..sources)
                .map(|k| {
                    let on: Vec<bool> = (0..frames).map(|_| rng.gen_bool(0.7)).collect();
                    Array2::from_shape_fn((frames, bins), |(t, f)| {
                        if on[t] && f / band.max(1) == k {
                            rng.gen_range(1.0..2.0)
                        } else {
                            0.0
                        }
                    })
                })
                .collect();
            let noise = Array2::from_shape_fn((frames, bins), |_| rng.gen_range(0.0..0.3));
            let mixture = refs.iter().fold(noise.clone(), |acc, r| acc + r);
            ToyExample {
                mixture: MagnitudeSpectrogram::new(mixture).expect("non-negative"),
                refs: refs
                    .into_iter()
                    .map(|r| MagnitudeSpectrogram::new(r).expect("non-negative"))
                    .collect(),
                noise: MagnitudeSpectrogram::new(noise).expect("non-negative"),
            }
        })
        .collect()
}

impl MaskEstimator for ToyEstimator {
    fn name(&self) -> &'static str {
        "toy"
    }

    fn reset_block(&mut self, _context: Option<&OracleContext>) {}

    fn estimate(&mut self, mixture: &MagnitudeSpectrogram, residual: &ResidualMask) -> Result<IterationResult> {
        let (t, f) = mixture.shape();
        check_shape("toy mixture bins", (t, self.params.bins()), (t, f))?;
        check_shape("toy residual", (t, f), residual.shape())?;
        let pass = self.pass(&Self::features(mixture), mixture, residual.data().clone());
        Ok(IterationResult {
            speaker_mask: Mask::clamped(pass.speaker),
            noise_mask: Mask::clamped(pass.noise),
            stop_flag: pass.flag,
            source: None,
        })
    }

    fn clone_box(&self) -> Box<dyn MaskEstimator> {
        Box::new(self.clone())
    }
}
