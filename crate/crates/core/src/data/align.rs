/// Number of visual frames covered by `n_samples` of audio, rounded, never below one.
pub fn frames_for_audio(n_samples: usize, sample_rate: u32, fps: u32) -> usize {
    let exact = n_samples as f64 * fps as f64 / sample_rate as f64;
    (exact.round() as usize).max(1)
}
