//! Fixtures shared by the benchmarks.

use xmodal::{generate_synthetic, Dataset, SynthConfig, Tensor};

/// Deterministic pseudo-random tensor with entries in [-1, 1).
pub fn filled(shape: &[usize], salt: u64) -> Tensor {
    let mut state = salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    Tensor::from_fn(shape, |_| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
    })
}

/// The default 20-speaker training world.
pub fn desk_dataset() -> Dataset {
    generate_synthetic(&SynthConfig::default()).expect("default synthetic config is valid")
}

/// Scores and labels for `n` trials, positives shifted upward.
pub fn trials(n: usize) -> (Vec<f64>, Vec<bool>) {
    let noise = filled(&[n], 7);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
    let scores = noise.data().iter().zip(&labels).map(|(s, &l)| s + if l { 0.5 } else { 0.0 }).collect();
    (scores, labels)
}
