//! Small shared helpers: compensated summation, jittered Cholesky,
//! checksums, RNG streams.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// First jitter added to every Gram diagonal. Escalates by 10x on Cholesky
/// failure up to [`MAX_JITTER`]. The base is small enough not to distort the
/// near-singular posteriors of smooth kernels, which the reported
/// log-likelihoods are sensitive to.
pub const BASE_JITTER: f64 = 1e-12;
pub const MAX_JITTER: f64 = 1e-4;

/// Cholesky failure after the full jitter escalation.
#[derive(Debug, Clone, Copy)]
pub struct CholeskyFailure {
    pub size: usize,
    /// Crude conditioning estimate: max diagonal over the final jitter.
    pub cond: f64,
}

/// Cholesky of `m + jitter I`, escalating jitter from [`BASE_JITTER`] by
/// factors of 10 until it succeeds or exceeds [`MAX_JITTER`]. Returns the
/// factorization and the jitter that was used.
pub fn stable_cholesky(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64), CholeskyFailure> {
    let n = m.nrows();
    let mut jitter = BASE_JITTER;
    while jitter <= MAX_JITTER {
        let mut jittered = m.clone();
        for i in 0..n {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol, jitter));
        }
        jitter *= 10.0;
    }
    let max_diag = (0..n).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
    Err(CholeskyFailure { size: n, cond: max_diag / MAX_JITTER })
}

/// Kahan-compensated sum; order-independent reductions feed values through
/// this in a fixed order so summaries are bit-reproducible.
pub fn kahan_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for &v in values {
        let y = v - c;
        let t = sum + y;
        c = (t - sum) - y;
        sum = t;
    }
    sum
}

/// Mean and standard error (sample std / sqrt n) of a slice.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = kahan_sum(values) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = kahan_sum(&sq) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

/// FNV-1a 64-bit checksum used by the checkpoint container.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent deterministic RNG stream `stream` under a master seed.
///
/// Streams with distinct ids never overlap; the same (seed, stream) pair
/// always yields the same draws, so per-task work can run on any thread.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.into());
    rng
}

/// Stream-id namespaces so different subsystems never share a stream.
pub mod streams {
    pub const TRAIN_TASK: u64 = 1 << 40;
    pub const EVAL_TASK: u64 = 2 << 40;
    pub const BAYESOPT: u64 = 3 << 40;
    pub const INIT: u64 = 4 << 40;
    pub const GENERATE: u64 = 5 << 40;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_handles_cancellation() {
        let vals = vec![1e16, 1.0, -1e16];
        assert_eq!(kahan_sum(&vals), 1.0);
    }

    #[test]
    fn rng_streams_are_independent_and_deterministic() {
        use rand::Rng;
        let mut a = rng_stream(7, 1);
        let mut b = rng_stream(7, 1);
        let mut c = rng_stream(7, 2);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        let xc: f64 = c.random();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn fnv_distinguishes_truncation() {
        let h1 = fnv1a64(b"abcdef");
        let h2 = fnv1a64(b"abcde");
        assert_ne!(h1, h2);
    }
}
