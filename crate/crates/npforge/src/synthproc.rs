//! Generators for the 1D processes used in meta-training and evaluation,
//! plus the task-sampling protocol.
//!
//! All sampling is a pure function of an explicitly passed RNG stream, so
//! tasks can be generated from any thread with independent streams.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::util::stable_cholesky;

/// Closed-form stationary kernels.
///
/// The kernel parameters are fixed to the values that reproduce the
/// published ground-truth GP log-likelihoods; the δ term of the noisy
/// mixture lives inside the kernel, so exact conditioning includes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelSpec {
    /// Exponentiated quadratic, lengthscale 1/4.
    Eq,
    /// Matérn-5/2 with d = 4|t - t'|.
    Matern52,
    /// EQ(1/4) + EQ(1) + 1e-3 δ[t - t'].
    NoisyMixture,
    /// Periodic components at period 1/4 under an EQ(1/2) envelope.
    WeaklyPeriodic,
}

impl KernelSpec {
    pub const ALL: [KernelSpec; 4] =
        [KernelSpec::Eq, KernelSpec::Matern52, KernelSpec::NoisyMixture, KernelSpec::WeaklyPeriodic];

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Eq => "eq",
            KernelSpec::Matern52 => "matern52",
            KernelSpec::NoisyMixture => "noisy-mixture",
            KernelSpec::WeaklyPeriodic => "weakly-periodic",
        }
    }
}

/// A generative process: GP with a fixed kernel, or the random sawtooth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProcessSpec {
    Kernel(KernelSpec),
    /// Truncated-Fourier sawtooth: amplitude 1, frequency U[3,5],
    /// shift U[-5,5], truncation U{10..20}.
    Sawtooth,
}

impl ProcessSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ProcessSpec::Kernel(k) => k.name(),
            ProcessSpec::Sawtooth => "sawtooth",
        }
    }

    pub fn parse(s: &str) -> Option<ProcessSpec> {
        match s {
            "eq" => Some(ProcessSpec::Kernel(KernelSpec::Eq)),
            "matern52" => Some(ProcessSpec::Kernel(KernelSpec::Matern52)),
            "noisy-mixture" => Some(ProcessSpec::Kernel(KernelSpec::NoisyMixture)),
            "weakly-periodic" => Some(ProcessSpec::Kernel(KernelSpec::WeaklyPeriodic)),
            "sawtooth" => Some(ProcessSpec::Sawtooth),
            _ => None,
        }
    }

    pub fn kernel(&self) -> Option<KernelSpec> {
        match self {
            ProcessSpec::Kernel(k) => Some(*k),
            ProcessSpec::Sawtooth => None,
        }
    }
}

/// Input ranges and set sizes for task sampling. Ranges are unions of
/// intervals sampled proportionally to length.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskProtocol {
    pub context_ranges: Vec<(f64, f64)>,
    pub target_ranges: Vec<(f64, f64)>,
    /// Context size is uniform on {0, ..., context_size_max}.
    pub context_size_max: usize,
    pub target_size: usize,
    pub regime: &'static str,
}

impl TaskProtocol {
    /// Meta-training protocol: x in [-2,2], context U{0..50}, target 50.
    pub fn train() -> Self {
        TaskProtocol {
            context_ranges: vec![(-2.0, 2.0)],
            target_ranges: vec![(-2.0, 2.0)],
            context_size_max: 50,
            target_size: 50,
            regime: "train",
        }
    }
}

/// A context/target pair drawn from one realization of the process.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub context: Vec<(f64, f64)>,
    pub target: Vec<(f64, f64)>,
}

impl Task {
    pub fn cx(&self) -> Vec<f64> {
        self.context.iter().map(|p| p.0).collect()
    }
    pub fn cy(&self) -> Vec<f64> {
        self.context.iter().map(|p| p.1).collect()
    }
    pub fn tx(&self) -> Vec<f64> {
        self.target.iter().map(|p| p.0).collect()
    }
    pub fn ty(&self) -> Vec<f64> {
        self.target.iter().map(|p| p.1).collect()
    }

    /// Context and target shifted by `tau` in input space.
    pub fn translated(&self, tau: f64) -> Task {
        Task {
            context: self.context.iter().map(|&(x, y)| (x + tau, y)).collect(),
            target: self.target.iter().map(|&(x, y)| (x + tau, y)).collect(),
        }
    }

    /// One-task JSON line with "cx","cy","tx","ty" arrays.
    pub fn dump_line(&self) -> String {
        fn arr(v: &[f64]) -> String {
            let items: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            format!("[{}]", items.join(","))
        }
        format!(
            "{{\"cx\":{},\"cy\":{},\"tx\":{},\"ty\":{}}}",
            arr(&self.cx()),
            arr(&self.cy()),
            arr(&self.tx()),
            arr(&self.ty())
        )
    }
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("cholesky failed on {size}x{size} gram after jitter escalation (condition estimate {cond:.3e})")]
    Cholesky { size: usize, cond: f64 },
}

/// Closed-form kernel value.
pub fn kernel_eval(spec: KernelSpec, t: f64, t2: f64) -> f64 {
    let diff = t - t2;
    match spec {
        KernelSpec::Eq => (-8.0 * diff * diff).exp(),
        KernelSpec::Matern52 => {
            let d = 4.0 * diff.abs();
            let s5 = 5.0_f64.sqrt();
            (1.0 + s5 * d + (5.0 / 3.0) * d * d) * (-s5 * d).exp()
        }
        KernelSpec::NoisyMixture => {
            let base = (-8.0 * diff * diff).exp() + (-0.5 * diff * diff).exp();
            if t == t2 {
                base + 1e-3
            } else {
                base
            }
        }
        KernelSpec::WeaklyPeriodic => {
            let c = (8.0 * std::f64::consts::PI * t).cos() - (8.0 * std::f64::consts::PI * t2).cos();
            let s = (8.0 * std::f64::consts::PI * t).sin() - (8.0 * std::f64::consts::PI * t2).sin();
            (-0.5 * c * c - 0.5 * s * s - 2.0 * diff * diff).exp()
        }
    }
}

/// Gram matrix of a kernel over inputs (no jitter).
pub fn gram(spec: KernelSpec, xs: &[f64]) -> DMatrix<f64> {
    let n = xs.len();
    DMatrix::from_fn(n, n, |i, j| kernel_eval(spec, xs[i], xs[j]))
}

/// One joint draw from N(0, K + jitter I) via Cholesky.
pub fn sample_gp<R: Rng>(spec: KernelSpec, inputs: &[f64], rng: &mut R) -> Result<Vec<f64>, SynthError> {
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let k = gram(spec, inputs);
    let (chol, _) = stable_cholesky(&k)
        .map_err(|e| SynthError::Cholesky { size: e.size, cond: e.cond })?;
    let z = nalgebra::DVector::from_iterator(
        inputs.len(),
        (0..inputs.len()).map(|_| StandardNormal.sample(rng) as f64),
    );
    let y = chol.l() * z;
    Ok(y.as_slice().to_vec())
}

/// One sawtooth realization: f(t) = A/2 - (A/pi) sum_{k=1..K} (-1)^k sin(2 pi k f (t-s)) / k.
pub fn sample_sawtooth<R: Rng>(inputs: &[f64], rng: &mut R) -> Vec<f64> {
    let amp = 1.0;
    let freq: f64 = rng.random_range(3.0..5.0);
    let shift: f64 = rng.random_range(-5.0..5.0);
    let trunc: usize = rng.random_range(10..=20);
    if inputs.is_empty() {
        return Vec::new();
    }
    inputs
        .iter()
        .map(|&t| {
            let mut acc = 0.0;
            for k in 1..=trunc {
                let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                acc += sign * (2.0 * std::f64::consts::PI * k as f64 * freq * (t - shift)).sin()
                    / k as f64;
            }
            amp / 2.0 - amp / std::f64::consts::PI * acc
        })
        .collect()
}

fn sample_in_ranges<R: Rng>(ranges: &[(f64, f64)], n: usize, rng: &mut R) -> Vec<f64> {
    let total: f64 = ranges.iter().map(|(a, b)| b - a).sum();
    (0..n)
        .map(|_| {
            let mut u = rng.random_range(0.0..total);
            for &(a, b) in ranges {
                let len = b - a;
                if u < len {
                    return a + u;
                }
                u -= len;
            }
            ranges.last().map(|&(_, b)| b).unwrap()
        })
        .collect()
}

/// Draw one task: sizes, inputs, then a single joint function realization
/// over the union of inputs, split back into context and target.
pub fn sample_task<R: Rng>(
    protocol: &TaskProtocol,
    process: ProcessSpec,
    rng: &mut R,
) -> Result<Task, SynthError> {
    let n_ctx = rng.random_range(0..=protocol.context_size_max);
    let cx = sample_in_ranges(&protocol.context_ranges, n_ctx, rng);
    let tx = sample_in_ranges(&protocol.target_ranges, protocol.target_size, rng);
    let mut all = cx.clone();
    all.extend_from_slice(&tx);
    let ys = match process {
        ProcessSpec::Kernel(k) => sample_gp(k, &all, rng)?,
        ProcessSpec::Sawtooth => sample_sawtooth(&all, rng),
    };
    let context = cx.into_iter().zip(ys[..n_ctx].iter().copied()).collect();
    let target = tx.into_iter().zip(ys[n_ctx..].iter().copied()).collect();
    Ok(Task { context, target })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::{rng_stream, BASE_JITTER};

    #[test]
    fn eq_at_equal_inputs_is_one() {
        assert_eq!(kernel_eval(KernelSpec::Eq, 0.37, 0.37), 1.0);
    }

    #[test]
    fn noisy_mixture_diagonal_includes_noise() {
        let v = kernel_eval(KernelSpec::NoisyMixture, -1.2, -1.2);
        assert!((v - 2.001).abs() < 1e-15);
    }

    #[test]
    fn matern_quarter_distance_regression_value() {
        // d = 1 at |t - t2| = 0.25; frozen from a high-precision evaluation
        // of (1 + sqrt5 + 5/3) exp(-sqrt5).
        let v = kernel_eval(KernelSpec::Matern52, 0.0, 0.25);
        assert!((v - 0.5239941088318203).abs() < 1e-15, "got {v}");
    }

    #[test]
    fn kernels_are_symmetric() {
        let mut rng = rng_stream(11, 0);
        for spec in KernelSpec::ALL {
            for _ in 0..200 {
                let a: f64 = rng.random_range(-4.0..4.0);
                let b: f64 = rng.random_range(-4.0..4.0);
                assert_eq!(kernel_eval(spec, a, b), kernel_eval(spec, b, a));
            }
        }
    }

    #[test]
    fn gram_matrices_stay_psd() {
        let mut rng = rng_stream(13, 0);
        for spec in KernelSpec::ALL {
            for _ in 0..20 {
                let xs: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
                let g = gram(spec, &xs);
                let eig = g.symmetric_eigenvalues();
                let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
                assert!(min >= -10.0 * BASE_JITTER, "{spec:?} eigmin {min}");
            }
        }
    }

    #[test]
    fn empty_inputs_yield_empty_draws() {
        let mut rng = rng_stream(1, 0);
        assert!(sample_gp(KernelSpec::Eq, &[], &mut rng).unwrap().is_empty());
        assert!(sample_sawtooth(&[], &mut rng).is_empty());
    }

    #[test]
    fn single_point_eq_draw_has_unit_variance() {
        let mut rng = rng_stream(42, 0);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let y = sample_gp(KernelSpec::Eq, &[0.3], &mut rng).unwrap()[0];
            sum += y;
            sumsq += y * y;
        }
        let var = sumsq / n as f64 - (sum / n as f64).powi(2);
        assert!((var - 1.0).abs() < 0.03, "sample variance {var}");
    }

    #[test]
    fn coincident_inputs_under_eq_stay_perfectly_correlated() {
        let mut rng = rng_stream(5, 0);
        for _ in 0..50 {
            let y = sample_gp(KernelSpec::Eq, &[0.7, 0.7], &mut rng).unwrap();
            assert!((y[0] - y[1]).abs() < 1e-5, "drift {}", (y[0] - y[1]).abs());
        }
    }

    #[test]
    fn sawtooth_outputs_stay_in_band() {
        let mut rng = rng_stream(9, 0);
        let xs: Vec<f64> = (0..100).map(|i| -5.0 + 0.1 * i as f64).collect();
        for _ in 0..10_000 {
            let ys = sample_sawtooth(&xs, &mut rng);
            for y in ys {
                assert!((-0.05..=1.05).contains(&y), "sawtooth out of band: {y}");
            }
        }
    }

    #[test]
    fn identical_seeds_reproduce_draws() {
        let xs = vec![-1.0, 0.0, 2.0];
        let a = sample_sawtooth(&xs, &mut rng_stream(3, 7));
        let b = sample_sawtooth(&xs, &mut rng_stream(3, 7));
        assert_eq!(a, b);
        let c = sample_gp(KernelSpec::Matern52, &xs, &mut rng_stream(3, 8)).unwrap();
        let d = sample_gp(KernelSpec::Matern52, &xs, &mut rng_stream(3, 8)).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn train_protocol_sizes_and_ranges() {
        let proto = TaskProtocol::train();
        let mut rng = rng_stream(21, 0);
        let mut seen_nonempty = false;
        for _ in 0..50 {
            let task =
                sample_task(&proto, ProcessSpec::Kernel(KernelSpec::Matern52), &mut rng).unwrap();
            assert!(task.context.len() <= 50);
            assert_eq!(task.target.len(), 50);
            seen_nonempty |= !task.context.is_empty();
            for (x, _) in task.context.iter().chain(task.target.iter()) {
                assert!((-2.0..=2.0).contains(x));
            }
        }
        assert!(seen_nonempty);
    }

    #[test]
    fn union_ranges_hit_both_halves() {
        let proto = TaskProtocol {
            context_ranges: vec![(-2.0, 2.0)],
            target_ranges: vec![(-4.0, -2.0), (2.0, 4.0)],
            context_size_max: 10,
            target_size: 50,
            regime: "extrap",
        };
        let mut rng = rng_stream(23, 0);
        let task = sample_task(&proto, ProcessSpec::Sawtooth, &mut rng).unwrap();
        let left = task.target.iter().filter(|(x, _)| *x < 0.0).count();
        let right = task.target.len() - left;
        assert!(left > 0 && right > 0);
        for (x, _) in &task.target {
            assert!((-4.0..=-2.0).contains(x) || (2.0..=4.0).contains(x));
        }
    }

    #[test]
    fn task_dump_line_is_json_shaped() {
        let task = Task { context: vec![(0.5, -1.0)], target: vec![(1.0, 2.0), (1.5, 0.25)] };
        let line = task.dump_line();
        assert_eq!(
            line,
            "{\"cx\":[0.5],\"cy\":[-1.0],\"tx\":[1.0,1.5],\"ty\":[2.0,0.25]}"
        );
    }
}
