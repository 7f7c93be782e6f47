//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recsep::simulator::{mix_session, SessionSpec, SessionTruth};
use recsep::{MagnitudeSpectrogram, Mask};

pub fn session(seconds: f64) -> SessionTruth {
    mix_session(&SessionSpec {
        duration: seconds,
        ..Default::default()
    })
    .expect("default spec is valid")
}

/// Random masks, mixture and references of one `frames` x `bins` block.
pub fn loss_instance(
    sources: usize,
    frames: usize,
    bins: usize,
) -> (Vec<Mask>, MagnitudeSpectrogram, Vec<MagnitudeSpectrogram>) {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut rand = |hi: f64| Array2::from_shape_fn((frames, bins), |_| rng.gen_range(0.0..hi));
    let refs: Vec<Array2<f64>> = (0..sources).map(|_| rand(1.0)).collect();
    let mix = refs.iter().fold(rand(0.1), |a, r| a + r);
    let masks = (0..sources).map(|_| Mask::new(rand(1.0)).unwrap()).collect();
    (
        masks,
        MagnitudeSpectrogram::new(mix).unwrap(),
        refs.into_iter()
            .map(|r| MagnitudeSpectrogram::new(r).unwrap())
            .collect(),
    )
}
