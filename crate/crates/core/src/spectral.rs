//! STFT analysis/synthesis and the time-frequency containers shared by the
//! rest of the crate.
//!
//! All matrices are stored frames-major: row `t` is one analysis frame, column
//! `f` one frequency bin, so a block of frames is a contiguous row range.

use std::f64::consts::PI;
use std::ops::Range;

use ndarray::{s, Array2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_shape, Error, Result};

/// Analysis window. Only the periodic Hann window is supported; it is COLA at
/// any hop of the form `frame_len / m` with `m >= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    PeriodicHann,
}

impl Window {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            Window::PeriodicHann => (0..len)
                .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop_len: usize,
    #[serde(default)]
    pub window: Window,
}

impl Default for StftConfig {
    /// 16 kHz, 512-sample frames, 256-sample hop: 2.4 s is exactly 150 frames.
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 512,
            hop_len: 256,
            window: Window::PeriodicHann,
        }
    }
}

impl StftConfig {
    pub fn new(sample_rate: u32, frame_len: usize, hop_len: usize) -> Result<Self> {
        let cfg = Self {
            sample_rate,
            frame_len,
            hop_len,
            window: Window::PeriodicHann,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidStft("sample_rate must be positive".into()));
        }
        if self.frame_len < 2 || !self.frame_len.is_power_of_two() {
            return Err(Error::InvalidStft(format!(
                "frame_len {} is not a power of two",
                self.frame_len
            )));
        }
        if self.hop_len == 0 || self.frame_len % self.hop_len != 0 {
            return Err(Error::InvalidStft(format!(
                "hop_len {} does not divide frame_len {}",
                self.hop_len, self.frame_len
            )));
        }
        let sums = self.overlap_sums();
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        let spread = sums.iter().fold(0.0f64, |m, &v| m.max((v - mean).abs()));
        if mean <= 0.0 || spread > 1e-9 * mean {
            return Err(Error::InvalidStft(format!(
                "window is not constant-overlap-add at hop {}",
                self.hop_len
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Sum of shifted windows over one hop period.
    fn overlap_sums(&self) -> Vec<f64> {
        let w = self.window.coefficients(self.frame_len);
        (0..self.hop_len)
            .map(|n| w.iter().skip(n).step_by(self.hop_len).sum())
            .collect()
    }

    /// The constant value of the overlapped window sum.
    pub fn cola_gain(&self) -> f64 {
        let sums = self.overlap_sums();
        sums.iter().sum::<f64>() / sums.len() as f64
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn num_frames(&self, len: usize) -> Option<usize> {
        (len >= self.frame_len).then(|| (len - self.frame_len) / self.hop_len + 1)
    }

    /// Sample range where every overlapping frame is present, so overlap-add
    /// reconstructs exactly.
    pub fn cola_valid_range(&self, frames: usize) -> Range<usize> {
        (self.frame_len - self.hop_len)..(frames * self.hop_len)
    }

    pub fn seconds_to_frames(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64 / self.hop_len as f64).round() as usize
    }
}

/// Padding that makes the COLA-valid region cover a whole signal, so a
/// masked resynthesis can be trimmed back to the input length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Framing {
    pub signal_len: usize,
    pub pad_front: usize,
    pub padded_len: usize,
    pub frames: usize,
}

impl Framing {
    pub fn new(signal_len: usize, cfg: &StftConfig) -> Self {
        let pad_front = cfg.frame_len - cfg.hop_len;
        let frames = (pad_front + signal_len).div_ceil(cfg.hop_len).max(1);
        let padded_len = (frames - 1) * cfg.hop_len + cfg.frame_len;
        Self {
            signal_len,
            pad_front,
            padded_len,
            frames,
        }
    }

    pub fn pad(&self, signal: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.padded_len];
        out[self.pad_front..self.pad_front + signal.len()].copy_from_slice(signal);
        out
    }

    pub fn trim(&self, synthesized: &[f64]) -> Vec<f64> {
        synthesized[self.pad_front..self.pad_front + self.signal_len].to_vec()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    data: Array2<Complex64>,
    config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn new(data: Array2<Complex64>, config: StftConfig) -> Result<Self> {
        config.validate()?;
        if data.ncols() != config.num_bins() {
            return Err(Error::shape(
                "complex spectrogram",
                (data.nrows(), config.num_bins()),
                data.dim(),
            ));
        }
        Ok(Self { data, config })
    }

    pub fn data(&self) -> &Array2<Complex64> {
        &self.data
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn shape(&self) -> (usize, usize) {
        self.data.dim()
    }

    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }
}

/// Non-negative real T×F matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSpectrogram(Array2<f64>);

impl MagnitudeSpectrogram {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(((row, col), &value)) = data.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::param(
                "magnitude",
                format!("entry ({row}, {col}) = {value} is not a finite non-negative value"),
            ));
        }
        Ok(Self(data))
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self(Array2::zeros((frames, bins)))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn energy(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    /// Copy of `rows` taken from a frame range that may extend past either
    /// end of the matrix; out-of-range frames are zero.
    pub fn window(&self, start: isize, len: usize) -> Self {
        let (frames, bins) = self.shape();
        let mut out = Array2::zeros((len, bins));
        let lo = start.max(0) as usize;
        let hi = ((start + len as isize).max(0) as usize).min(frames);
        if lo < hi {
            let dst = (lo as isize - start) as usize;
            out.slice_mut(s![dst..dst + (hi - lo), ..])
                .assign(&self.0.slice(s![lo..hi, ..]));
        }
        Self(out)
    }
}

/// Real T×F matrix with every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Array2<f64>);

impl Mask {
    /// Rejects any value outside `[0, 1]` (including NaN).
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if let Some(((row, col), &value)) = data.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::MaskOutOfRange { row, col, value });
        }
        Ok(Self(data))
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn clamped(mut data: Array2<f64>) -> Self {
        data.mapv_inplace(clamp_unit);
        Self(data)
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self(Array2::zeros((frames, bins)))
    }

    pub fn ones(frames: usize, bins: usize) -> Self {
        Self(Array2::ones((frames, bins)))
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Sum of squared mask values.
    pub fn energy(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn zero_rows(&mut self, rows: Range<usize>) {
        self.0.slice_mut(s![rows, ..]).fill(0.0);
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub fn stft(signal: &[f64], cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let frames = cfg.num_frames(signal.len()).ok_or(Error::InputTooShort {
        len: signal.len(),
        needed: cfg.frame_len,
    })?;
    let bins = cfg.num_bins();
    let window = cfg.window.coefficients(cfg.frame_len);
    let fft = FftPlanner::new().plan_fft_forward(cfg.frame_len);
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.frame_len];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Array2::zeros((frames, bins));
    for (t, mut row) in data.rows_mut().into_iter().enumerate() {
        let frame = &signal[t * cfg.hop_len..t * cfg.hop_len + cfg.frame_len];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex64::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        row.iter_mut().zip(&buf[..bins]).for_each(|(r, &b)| *r = b);
    }
    ComplexSpectrogram::new(data, *cfg)
}

/// Overlap-add synthesis normalized by the window's COLA gain. Output length
/// is `(T - 1) * hop + frame_len`.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Vec<f64>> {
    let cfg = spec.config();
    cfg.validate()?;
    let (frames, bins) = spec.shape();
    check_shape("istft", (frames, cfg.num_bins()), (frames, bins))?;
    if frames == 0 {
        return Ok(Vec::new());
    }
    let n = cfg.frame_len;
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut out = vec![0.0; (frames - 1) * cfg.hop_len + n];
    let scale = 1.0 / (n as f64 * cfg.cola_gain());
    for (t, row) in spec.data().rows().into_iter().enumerate() {
        // Hermitian extension of the half spectrum.
        for (k, &v) in row.iter().enumerate() {
            buf[k] = v;
        }
        for k in bins..n {
            buf[k] = row[n - k].conj();
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let seg = &mut out[t * cfg.hop_len..t * cfg.hop_len + n];
        seg.iter_mut().zip(&buf).for_each(|(o, b)| *o += b.re * scale);
    }
    Ok(out)
}

pub fn magnitude(spec: &ComplexSpectrogram) -> MagnitudeSpectrogram {
    MagnitudeSpectrogram(spec.data().mapv(|c| c.norm()))
}

/// Elementwise product of a mask with the complex spectrogram (keeps the
/// mixture phase).
pub fn apply_mask(mask: &Mask, spec: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
    check_shape("apply_mask", spec.shape(), mask.shape())?;
    let mut data = spec.data().clone();
    Zip::from(&mut data).and(mask.data()).for_each(|c, &m| *c *= m);
    Ok(ComplexSpectrogram {
        data,
        config: *spec.config(),
    })
}

/// Forward transform of a signal padded by [`Framing`], returning both.
pub fn analyze(signal: &[f64], cfg: &StftConfig) -> Result<(ComplexSpectrogram, Framing)> {
    let framing = Framing::new(signal.len(), cfg);
    let spec = stft(&framing.pad(signal), cfg)?;
    Ok((spec, framing))
}

/// Inverse of [`analyze`]: synthesize and trim back to the original length.
pub fn synthesize(spec: &ComplexSpectrogram, framing: &Framing) -> Result<Vec<f64>> {
    Ok(framing.trim(&istft(spec)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> StftConfig {
        StftConfig::default()
    }

    #[test]
    fn config_validation() {
        assert!(StftConfig::new(16_000, 512, 256).is_ok());
        assert!(StftConfig::new(16_000, 512, 128).is_ok());
        assert!(StftConfig::new(16_000, 500, 250).is_err());
        assert!(StftConfig::new(16_000, 512, 200).is_err());
        // hop == frame_len is not COLA for Hann
        assert!(StftConfig::new(16_000, 512, 512).is_err());
        assert!((cfg().cola_gain() - 1.0).abs() < 1e-12);
        assert!((StftConfig::new(16_000, 512, 128).unwrap().cola_gain() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let spec = stft(&vec![0.0; 16_000], &cfg()).unwrap();
        assert_eq!(spec.shape(), (61, 257));
        assert!(spec.data().iter().all(|c| c.norm() == 0.0));
        assert!(istft(&spec).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn too_short_is_an_error() {
        let err = stft(&[0.0; 100], &cfg()).unwrap_err();
        assert!(err.to_string().contains("input too short"));
    }

    #[test]
    fn bin_centered_sinusoid_is_concentrated() {
        let c = cfg();
        let k0 = 20;
        let f0 = k0 as f64 * c.sample_rate as f64 / c.frame_len as f64;
        let x: Vec<f64> = (0..8000)
            .map(|n| (2.0 * PI * f0 * n as f64 / c.sample_rate as f64).sin())
            .collect();
        let spec = stft(&x, &c).unwrap();
        let w = c.window.coefficients(c.frame_len);
        for (t, row) in spec.data().rows().into_iter().enumerate() {
            // Direct DFT of the windowed frame as the reference.
            let frame = &x[t * c.hop_len..t * c.hop_len + c.frame_len];
            for k in [k0 - 1, k0, k0 + 1, k0 + 5] {
                let direct: Complex64 = frame
                    .iter()
                    .zip(&w)
                    .enumerate()
                    .map(|(n, (&v, &wn))| {
                        Complex64::from_polar(v * wn, -2.0 * PI * (k * n) as f64 / c.frame_len as f64)
                    })
                    .sum();
                assert!((direct - row[k]).norm() < 1e-8);
            }
            let peak = row[k0].norm();
            let argmax = (0..row.len())
                .max_by(|&a, &b| row[a].norm().total_cmp(&row[b].norm()))
                .unwrap();
            assert_eq!(argmax, k0);
            for (k, v) in row.iter().enumerate() {
                if k.abs_diff(k0) >= 2 {
                    assert!(20.0 * (v.norm() / peak).log10() <= -60.0, "bin {k}");
                }
            }
        }
    }

    #[test]
    fn single_frame_inverse_is_windowed_frame_over_gain() {
        let c = StftConfig::new(16_000, 64, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = istft(&stft(&x, &c).unwrap()).unwrap();
        let w = c.window.coefficients(64);
        assert_eq!(y.len(), 64);
        for n in 0..64 {
            assert!((y[n] - x[n] * w[n] / c.cola_gain()).abs() < 1e-12);
        }
    }

    #[test]
    fn framing_round_trip_covers_whole_signal() {
        let c = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for len in [1usize, 255, 256, 1000, 16_000] {
            let x: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (spec, framing) = analyze(&x, &c).unwrap();
            let y = synthesize(&spec, &framing).unwrap();
            assert_eq!(y.len(), len);
            let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "len {len}: {err}");
        }
    }

    #[test]
    fn magnitude_and_mask_examples() {
        let c = StftConfig::new(16_000, 4, 2).unwrap();
        let data = Array2::from_elem((1, 3), Complex64::new(3.0, 4.0));
        let spec = ComplexSpectrogram::new(data, c).unwrap();
        assert!(magnitude(&spec).data().iter().all(|&v| v == 5.0));

        let half = Mask::new(Array2::from_elem((1, 3), 0.5)).unwrap();
        let masked = apply_mask(&half, &spec).unwrap();
        assert!(masked.data().iter().all(|&v| v == Complex64::new(1.5, 2.0)));
        assert_eq!(apply_mask(&Mask::ones(1, 3), &spec).unwrap(), spec);
        assert!(apply_mask(&Mask::zeros(1, 3), &spec)
            .unwrap()
            .data()
            .iter()
            .all(|c| c.norm() == 0.0));
        assert!(matches!(
            apply_mask(&Mask::zeros(2, 3), &spec),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_construction() {
        assert!(Mask::new(Array2::from_elem((2, 2), 1.5)).is_err());
        assert!(Mask::new(Array2::from_elem((2, 2), f64::NAN)).is_err());
        let m = Mask::clamped(Array2::from_shape_vec((1, 3), vec![-0.5, 0.5, 2.0]).unwrap());
        assert_eq!(m.data().as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn window_pads_out_of_range_frames() {
        let m = MagnitudeSpectrogram::new(Array2::from_shape_fn((4, 2), |(t, _)| t as f64 + 1.0)).unwrap();
        let w = m.window(-2, 4);
        assert_eq!(w.data().column(0).to_vec(), vec![0.0, 0.0, 1.0, 2.0]);
        let w = m.window(3, 3);
        assert_eq!(w.data().column(0).to_vec(), vec![4.0, 0.0, 0.0]);
    }
}
