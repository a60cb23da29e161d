//! First stage of the translation-equivariant set encoder: functional
//! embedding with a density channel, grid discretization, and RBF smoothing
//! back to arbitrary target inputs.

use thiserror::Error;

use crate::autodiff::{Tape, ValueId};
use crate::autodiff::Result as AdResult;

/// Points-per-unit density of the discretization grid.
pub const GRID_DENSITY: f64 = 64.0;
/// Margin added on both sides of the data span.
pub const GRID_MARGIN: f64 = 1.0;

/// Uniform grid t_i = start + i * spacing covering the data span plus margin.
#[derive(Debug, Clone, PartialEq)]
pub struct Discretization {
    pub start: f64,
    pub spacing: f64,
    pub count: usize,
}

#[derive(Debug, Error)]
pub enum DiscretizationError {
    #[error("cannot discretize an empty input set")]
    EmptyInputs,
    #[error("density must be positive, got {0}")]
    BadDensity(f64),
}

impl Discretization {
    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.spacing
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.point(i)).collect()
    }

    pub fn end(&self) -> f64 {
        self.point(self.count - 1)
    }

    /// Same grid shifted by `tau`.
    pub fn translated(&self, tau: f64) -> Discretization {
        Discretization { start: self.start + tau, spacing: self.spacing, count: self.count }
    }
}

/// Grid spanning [min(xs) - margin, max(xs) + margin] at `density` points
/// per unit; count = ceil(span * density) + 1. Callers pass the union of
/// context and target inputs, which is non-empty because targets are.
pub fn make_discretization(
    xs: &[f64],
    density: f64,
    margin: f64,
) -> Result<Discretization, DiscretizationError> {
    if xs.is_empty() {
        return Err(DiscretizationError::EmptyInputs);
    }
    if density <= 0.0 {
        return Err(DiscretizationError::BadDensity(density));
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - margin;
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + margin;
    let span = hi - lo;
    let count = (span * density).ceil() as usize + 1;
    Ok(Discretization { start: lo, spacing: 1.0 / density, count: count.max(2) })
}

/// Learnable lengthscales, stored unconstrained and mapped through softplus.
/// Initialized to twice the grid spacing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthscaleSet {
    pub embed_density: f64,
    pub embed_data: f64,
    pub smooth_mean: f64,
    pub smooth_std: f64,
}

impl LengthscaleSet {
    /// Raw (pre-softplus) initialization so every scale starts at
    /// 2 * spacing.
    pub fn init_raw(spacing: f64) -> Self {
        let raw = softplus_inverse(2.0 * spacing);
        LengthscaleSet {
            embed_density: raw,
            embed_data: raw,
            smooth_mean: raw,
            smooth_std: raw,
        }
    }
}

/// Inverse of ln(1 + e^x): ln(e^y - 1).
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0);
    y.exp_m1().ln()
}

/// Grid-discretized functional embedding of a data set: density channel and
/// density-normalized data channel, as a [2, K] tape node.
pub fn embed(
    tape: &mut Tape,
    context: &[(f64, f64)],
    disc: &Discretization,
    scale_density: ValueId,
    scale_data: ValueId,
) -> AdResult<ValueId> {
    let cx: Vec<f64> = context.iter().map(|p| p.0).collect();
    let cy: Vec<f64> = context.iter().map(|p| p.1).collect();
    tape.embed(&cx, &cy, disc.start, disc.spacing, disc.count, scale_density, scale_data)
}

/// RBF-weighted readout of per-segment grid values at the targets:
/// [c, segs*K] -> [c, segs*M].
pub fn smooth(
    tape: &mut Tape,
    grid_values: ValueId,
    disc: &Discretization,
    targets: &[f64],
    scale: ValueId,
) -> AdResult<ValueId> {
    tape.rbf_smooth(grid_values, disc.start, disc.spacing, disc.count, targets, scale)
}
