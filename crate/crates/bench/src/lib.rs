//! Benchmarks live in `benches/`; this crate only hosts shared fixtures.

use cimark::data::synth_textures;
use cimark::rng::seeded_rng;
use cimark::{BitMessage, ImageTensor};

/// `n` textures and random messages of `bits` bits, fixed per seed.
pub fn batch(n: usize, size: usize, bits: usize) -> (Vec<ImageTensor>, Vec<BitMessage>) {
    let images = synth_textures(&mut seeded_rng(1), n, size, size);
    let mut rng = seeded_rng(2);
    let messages = (0..n).map(|_| BitMessage::random(&mut rng, bits)).collect();
    (images, messages)
}
