use super::tape::ValueId;
use super::tensor::Tensor;

/// The primitive set recorded on the tape.
///
/// Every variant has an analytic backward rule; forward evaluation is
/// deterministic given the inputs (noise enters only through constant
/// epsilon tensors held by `GaussSample`).
#[derive(Debug, Clone)]
pub enum Op {
    /// Input node: parameter or constant. No backward rule.
    Leaf,
    /// Elementwise a + b.
    Add(ValueId, ValueId),
    /// Elementwise a - b.
    Sub(ValueId, ValueId),
    /// Elementwise a * b.
    Mul(ValueId, ValueId),
    /// a * c for a fixed scalar c.
    Scale(ValueId, f64),
    /// a + c for a fixed scalar c.
    AddConst(ValueId, f64),
    /// Dense affine map: x [n,i] * w^T [o,i] + b [o] -> [n,o].
    Linear { x: ValueId, w: ValueId, b: ValueId },
    /// 1x1 convolution mixing channels: w [co,ci] * x [ci,n] + b [co] -> [co,n].
    PointwiseConv { x: ValueId, w: ValueId, b: ValueId },
    /// Per-channel stride-1 convolution with zero ("same") padding.
    ///
    /// `x` is [c, segs*seg_len]; each length-`seg_len` segment is padded and
    /// convolved independently so batched samples never bleed into each other.
    DepthwiseConv { x: ValueId, w: ValueId, seg_len: usize },
    LeakyRelu(ValueId, f64),
    Softplus(ValueId),
    Sigmoid(ValueId),
    Exp(ValueId),
    Log(ValueId),
    /// Sum of all elements -> scalar.
    Sum(ValueId),
    /// Mean of all elements -> scalar.
    Mean(ValueId),
    /// Row sums: [r,c] -> [r].
    SumCols(ValueId),
    /// Row means: [r,c] -> [r].
    MeanCols(ValueId),
    /// Column means (pooling over rows): [r,c] -> [c].
    MeanRows(ValueId),
    /// log sum exp over all elements (max-shifted) -> scalar.
    LogSumExp(ValueId),
    /// Elementwise Gaussian log-density of fixed observations `y` under
    /// (mu, sigma). `y` may be a single row broadcast over mu's rows;
    /// `sigma` may be rank-1 with one entry per row.
    GaussianLogPdf { y: Tensor, mu: ValueId, sigma: ValueId },
    /// Reparameterized draw mu + sigma .* eps with eps fixed.
    GaussSample { mu: ValueId, sigma: ValueId, eps: Tensor },
    /// KL(N(mu_q, sig_q^2) || N(mu_p, sig_p^2)) summed over all entries -> scalar.
    KlDiagGauss { mu_q: ValueId, sig_q: ValueId, mu_p: ValueId, sig_p: ValueId },
    /// Functional embedding of a data set onto a uniform grid: density
    /// channel and normalized data channel -> [2, k].
    ///
    /// `aux` caches per-node sums of psi*r^2 for the two lengthscale
    /// gradients (density first, data second; each `k` long).
    Embed {
        ctx_x: Vec<f64>,
        ctx_y: Vec<f64>,
        grid_start: f64,
        grid_step: f64,
        k: usize,
        scale_density: ValueId,
        scale_data: ValueId,
        aux: Vec<f64>,
    },
    /// RBF smoothing of per-segment grid values to arbitrary targets:
    /// [c, segs*k] -> [c, segs*m]. `w` caches the [m,k] weight matrix,
    /// `wd2` the weights times squared distances (for the scale gradient).
    RbfSmooth {
        vals: ValueId,
        scale: ValueId,
        k: usize,
        targets: Vec<f64>,
        grid_start: f64,
        grid_step: f64,
        w: Vec<f64>,
        wd2: Vec<f64>,
    },
    /// Rows [start, start+len) of a rank-2 tensor.
    SliceRows { x: ValueId, start: usize, len: usize },
    /// Columns [start, start+len) of a rank-2 tensor.
    SliceCols { x: ValueId, start: usize, len: usize },
    /// Same data, new shape.
    Reshape(ValueId),
    /// Cartesian pairing: fixed rows xs [m,dx] with z [l,dz] -> [l*m, dx+dz];
    /// row l*m+j is [xs[j], z[l]].
    PairConcat { xs: Tensor, z: ValueId },
}

/// Unnormalized Gaussian RBF psi(r) = exp(-r^2 / (2 l^2)) with psi(0) = 1.
#[inline]
pub fn rbf(r: f64, lengthscale: f64) -> f64 {
    (-r * r / (2.0 * lengthscale * lengthscale)).exp()
}

/// Numerically stable softplus ln(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LN_2PI: f64 = 1.8378770664093453;

/// Safe wrapper over `matrixmultiply::dgemm`: c += a * b for row-major
/// slices with explicit dimensions, or c = a * b when `overwrite`.
#[allow(clippy::too_many_arguments)]
pub fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    overwrite: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if overwrite { 0.0 } else { 1.0 };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Depthwise same-padded convolution forward for one channel, one segment.
#[inline]
pub fn dw_conv_seg(x: &[f64], w: &[f64], out: &mut [f64]) {
    let t = x.len();
    let kw = w.len();
    let h = (kw - 1) / 2;
    for (j, &wj) in w.iter().enumerate() {
        let off = j as isize - h as isize;
        let lo = (-off).max(0) as usize;
        let hi = (t as isize - off).min(t as isize) as usize;
        let xs = &x[(lo as isize + off) as usize..(hi as isize + off) as usize];
        let os = &mut out[lo..hi];
        for (o, &xv) in os.iter_mut().zip(xs.iter()) {
            *o += wj * xv;
        }
    }
}

/// Backward of `dw_conv_seg` with respect to the input.
#[inline]
pub fn dw_conv_seg_dx(dout: &[f64], w: &[f64], dx: &mut [f64]) {
    let t = dout.len();
    let kw = w.len();
    let h = (kw - 1) / 2;
    for (j, &wj) in w.iter().enumerate() {
        let off = j as isize - h as isize;
        let lo = (-off).max(0) as usize;
        let hi = (t as isize - off).min(t as isize) as usize;
        let ds = &dout[lo..hi];
        let xs = &mut dx[(lo as isize + off) as usize..(hi as isize + off) as usize];
        for (xg, &d) in xs.iter_mut().zip(ds.iter()) {
            *xg += wj * d;
        }
    }
}

/// Backward of `dw_conv_seg` with respect to the kernel.
#[inline]
pub fn dw_conv_seg_dw(dout: &[f64], x: &[f64], dw: &mut [f64]) {
    let t = dout.len();
    let kw = dw.len();
    let h = (kw - 1) / 2;
    for (j, dwj) in dw.iter_mut().enumerate() {
        let off = j as isize - h as isize;
        let lo = (-off).max(0) as usize;
        let hi = (t as isize - off).min(t as isize) as usize;
        let ds = &dout[lo..hi];
        let xs = &x[(lo as isize + off) as usize..(hi as isize + off) as usize];
        let mut acc = 0.0;
        for (&d, &xv) in ds.iter().zip(xs.iter()) {
            acc += d * xv;
        }
        *dwj += acc;
    }
}
