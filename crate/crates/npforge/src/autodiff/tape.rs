use super::ops::{
    dgemm_rm, dw_conv_seg, dw_conv_seg_dw, dw_conv_seg_dx, rbf, sigmoid, softplus, Op, LN_2PI,
};
use super::tensor::Tensor;
use super::{AutodiffError, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
}

impl Node {
    fn placeholder() -> Self {
        Node { op: Op::Leaf, value: Tensor::scalar(0.0), grad: None }
    }
}

/// Eagerly-evaluated computation tape.
///
/// Ops compute their forward value as they are appended, so node order is
/// topological and `backward` is one reverse sweep. A tape supports at most
/// one backward traversal per forward evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    evaluated: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), evaluated: false, backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> ValueId {
        self.nodes.push(Node { op, value, grad: None });
        ValueId(self.nodes.len() - 1)
    }

    /// Leaf holding inputs or parameters.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated on a node (zeros if the backward sweep never
    /// reached it).
    pub fn grad(&self, id: ValueId) -> Vec<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.len()],
        }
    }

    /// Forward values of the root. With eager construction this returns the
    /// cached forward value and arms the tape for a backward pass.
    pub fn evaluate(&mut self, root: ValueId) -> &Tensor {
        self.evaluated = true;
        &self.nodes[root.0].value
    }

    // ---- elementwise ----------------------------------------------------

    fn binary_same_shape(
        &mut self,
        opname: &'static str,
        a: ValueId,
        b: ValueId,
    ) -> Result<(Vec<usize>, usize)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape != vb.shape {
            return Err(mismatch(opname, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        Ok((va.shape.clone(), va.len()))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, n) = self.binary_same_shape("add", a, b)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].value.data[i] + self.nodes[b.0].value.data[i]);
        }
        Ok(self.push(Op::Add(a, b), Tensor::new(shape, data)))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, n) = self.binary_same_shape("sub", a, b)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].value.data[i] - self.nodes[b.0].value.data[i]);
        }
        Ok(self.push(Op::Sub(a, b), Tensor::new(shape, data)))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (shape, n) = self.binary_same_shape("mul", a, b)?;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(self.nodes[a.0].value.data[i] * self.nodes[b.0].value.data[i]);
        }
        Ok(self.push(Op::Mul(a, b), Tensor::new(shape, data)))
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x * c).collect());
        self.push(Op::Scale(a, c), t)
    }

    pub fn add_const(&mut self, a: ValueId, c: f64) -> ValueId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|x| x + c).collect());
        self.push(Op::AddConst(a, c), t)
    }

    fn unary<F: Fn(f64) -> f64>(&mut self, a: ValueId, f: F, op: Op) -> ValueId {
        let v = &self.nodes[a.0].value;
        let t = Tensor::new(v.shape.clone(), v.data.iter().map(|&x| f(x)).collect());
        self.push(op, t)
    }

    pub fn leaky_relu(&mut self, a: ValueId, slope: f64) -> ValueId {
        self.unary(a, |x| if x >= 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> ValueId {
        self.unary(a, f64::ln, Op::Log(a))
    }

    // ---- dense / convolutional maps -------------------------------------

    /// x [n,i] * w^T + b with w [o,i], b [o].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (n, i) = self.nodes[x.0].value.dims2();
        let (o, iw) = self.nodes[w.0].value.dims2();
        let bl = self.nodes[b.0].value.len();
        if i != iw || bl != o {
            return Err(mismatch(
                "linear",
                format!("x [{n},{i}], w [{o},{iw}], b [{bl}]"),
            ));
        }
        let mut out = vec![0.0; n * o];
        dgemm_rm(
            n,
            i,
            o,
            &self.nodes[x.0].value.data,
            false,
            &self.nodes[w.0].value.data,
            true,
            &mut out,
            true,
        );
        let bd = &self.nodes[b.0].value.data;
        for row in out.chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(bd.iter()) {
                *v += bb;
            }
        }
        Ok(self.push(Op::Linear { x, w, b }, Tensor::matrix(n, o, out)))
    }

    /// Channel-mixing 1x1 convolution: w [co,ci] * x [ci,n] + b [co].
    pub fn pointwise_conv(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (ci, n) = self.nodes[x.0].value.dims2();
        let (co, ciw) = self.nodes[w.0].value.dims2();
        let bl = self.nodes[b.0].value.len();
        if ci != ciw || bl != co {
            return Err(mismatch(
                "pointwise_conv",
                format!("x [{ci},{n}], w [{co},{ciw}], b [{bl}]"),
            ));
        }
        let mut out = vec![0.0; co * n];
        dgemm_rm(
            co,
            ci,
            n,
            &self.nodes[w.0].value.data,
            false,
            &self.nodes[x.0].value.data,
            false,
            &mut out,
            true,
        );
        let bd = &self.nodes[b.0].value.data;
        for (c, row) in out.chunks_mut(n).enumerate() {
            let bb = bd[c];
            for v in row.iter_mut() {
                *v += bb;
            }
        }
        Ok(self.push(Op::PointwiseConv { x, w, b }, Tensor::matrix(co, n, out)))
    }

    /// Per-channel same-padded convolution; `x` is [c, segs*seg_len] and each
    /// segment is convolved independently. Kernel width must be odd.
    pub fn depthwise_conv(&mut self, x: ValueId, w: ValueId, seg_len: usize) -> Result<ValueId> {
        let (c, n) = self.nodes[x.0].value.dims2();
        let (cw, kw) = self.nodes[w.0].value.dims2();
        if c != cw || kw % 2 == 0 || seg_len == 0 || n % seg_len != 0 {
            return Err(mismatch(
                "depthwise_conv",
                format!("x [{c},{n}], w [{cw},{kw}], seg_len {seg_len}"),
            ));
        }
        let segs = n / seg_len;
        let mut out = vec![0.0; c * n];
        {
            let xv = &self.nodes[x.0].value.data;
            let wv = &self.nodes[w.0].value.data;
            for ch in 0..c {
                let wrow = &wv[ch * kw..(ch + 1) * kw];
                for s in 0..segs {
                    let base = ch * n + s * seg_len;
                    dw_conv_seg(&xv[base..base + seg_len], wrow, &mut out[base..base + seg_len]);
                }
            }
        }
        Ok(self.push(Op::DepthwiseConv { x, w, seg_len }, Tensor::matrix(c, n, out)))
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.data.iter().sum();
        let m = s / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn sum_cols(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2("sum_cols", a)?;
        let v = &self.nodes[a.0].value.data;
        let data: Vec<f64> = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        Ok(self.push(Op::SumCols(a), Tensor::vector(data)))
    }

    pub fn mean_cols(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2("mean_cols", a)?;
        let v = &self.nodes[a.0].value.data;
        let data: Vec<f64> =
            (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64).collect();
        Ok(self.push(Op::MeanCols(a), Tensor::vector(data)))
    }

    /// Pool over rows: [r,c] -> [c]. Requires at least one row.
    pub fn mean_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = self.require_rank2("mean_rows", a)?;
        if r == 0 {
            return Err(mismatch("mean_rows", "zero rows".into()));
        }
        let v = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; c];
        for row in v.chunks(c) {
            for (d, &x) in data.iter_mut().zip(row.iter()) {
                *d += x;
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        Ok(self.push(Op::MeanRows(a), Tensor::vector(data)))
    }

    fn require_rank2(&self, op: &'static str, a: ValueId) -> Result<(usize, usize)> {
        let v = &self.nodes[a.0].value;
        if v.shape.len() != 2 {
            return Err(mismatch(op, format!("rank-2 required, got {:?}", v.shape)));
        }
        Ok((v.shape[0], v.shape[1]))
    }

    /// Max-shifted log sum exp over all elements.
    pub fn logsumexp(&mut self, a: ValueId) -> Result<ValueId> {
        let v = &self.nodes[a.0].value;
        if v.is_empty() {
            return Err(mismatch("logsumexp", "empty input".into()));
        }
        let m = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.data.iter().map(|&x| (x - m).exp()).sum();
        let out = m + s.ln();
        Ok(self.push(Op::LogSumExp(a), Tensor::scalar(out)))
    }

    // ---- probabilistic ops -----------------------------------------------

    /// Elementwise log N(y; mu, sigma^2). `y` is fixed data: either the same
    /// shape as `mu` or a single row broadcast over mu's rows. `sigma` has
    /// mu's shape or is rank-1 with one entry per row of `mu`.
    pub fn gaussian_logpdf(&mut self, y: Tensor, mu: ValueId, sigma: ValueId) -> Result<ValueId> {
        let (r, m) = self.nodes[mu.0].value.dims2();
        let sv = &self.nodes[sigma.0].value;
        let per_row_sigma = sv.shape.len() == 1 && sv.len() == r && m != r;
        let sigma_full = sv.len() == r * m && !per_row_sigma;
        if !(per_row_sigma || sigma_full) {
            return Err(mismatch(
                "gaussian_logpdf",
                format!("mu [{r},{m}], sigma {:?}", sv.shape),
            ));
        }
        let y_bcast = y.len() == m && r > 1;
        if !y_bcast && y.len() != r * m {
            return Err(mismatch(
                "gaussian_logpdf",
                format!("mu [{r},{m}], y {:?}", y.shape),
            ));
        }
        let muv = &self.nodes[mu.0].value.data;
        let mut out = vec![0.0; r * m];
        for i in 0..r {
            for j in 0..m {
                let idx = i * m + j;
                let yv = if y_bcast { y.data[j] } else { y.data[idx] };
                let s = if per_row_sigma { sv.data[i] } else { sv.data[idx] };
                let z = (yv - muv[idx]) / s;
                out[idx] = -0.5 * LN_2PI - s.ln() - 0.5 * z * z;
            }
        }
        let shape = self.nodes[mu.0].value.shape.clone();
        Ok(self.push(Op::GaussianLogPdf { y, mu, sigma }, Tensor::new(shape, out)))
    }

    /// mu + sigma .* eps with eps treated as a constant (pathwise sampling).
    pub fn gauss_sample(&mut self, mu: ValueId, sigma: ValueId, eps: Tensor) -> Result<ValueId> {
        let (shape, n) = self.binary_same_shape("gauss_sample", mu, sigma)?;
        if eps.len() != n {
            return Err(mismatch("gauss_sample", format!("eps len {}", eps.len())));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(
                self.nodes[mu.0].value.data[i] + self.nodes[sigma.0].value.data[i] * eps.data[i],
            );
        }
        Ok(self.push(Op::GaussSample { mu, sigma, eps }, Tensor::new(shape, data)))
    }

    /// Closed-form KL between diagonal Gaussians, summed over all entries.
    pub fn kl_diag_gauss(
        &mut self,
        mu_q: ValueId,
        sig_q: ValueId,
        mu_p: ValueId,
        sig_p: ValueId,
    ) -> Result<ValueId> {
        let n = self.nodes[mu_q.0].value.len();
        for (name, id) in [("sig_q", sig_q), ("mu_p", mu_p), ("sig_p", sig_p)] {
            if self.nodes[id.0].value.len() != n {
                return Err(mismatch("kl_diag_gauss", format!("{name} len mismatch")));
            }
        }
        let mq = &self.nodes[mu_q.0].value.data;
        let sq = &self.nodes[sig_q.0].value.data;
        let mp = &self.nodes[mu_p.0].value.data;
        let sp = &self.nodes[sig_p.0].value.data;
        let mut acc = 0.0;
        for i in 0..n {
            let dm = mq[i] - mp[i];
            acc += sp[i].ln() - sq[i].ln() + (sq[i] * sq[i] + dm * dm) / (2.0 * sp[i] * sp[i])
                - 0.5;
        }
        Ok(self.push(Op::KlDiagGauss { mu_q, sig_q, mu_p, sig_p }, Tensor::scalar(acc)))
    }

    // ---- set embedding and smoothing -------------------------------------

    /// Functional embedding of (ctx_x, ctx_y) on the grid
    /// t_i = grid_start + i*grid_step, i < k. Returns [2,k]: density channel
    /// then the density-normalized data channel. Empty contexts embed to
    /// all-zero channels.
    pub fn embed(
        &mut self,
        ctx_x: &[f64],
        ctx_y: &[f64],
        grid_start: f64,
        grid_step: f64,
        k: usize,
        scale_density: ValueId,
        scale_data: ValueId,
    ) -> Result<ValueId> {
        if ctx_x.len() != ctx_y.len() {
            return Err(mismatch("embed", format!("{} xs, {} ys", ctx_x.len(), ctx_y.len())));
        }
        for (name, id) in [("scale_density", scale_density), ("scale_data", scale_data)] {
            if !self.nodes[id.0].value.is_scalar() {
                return Err(mismatch("embed", format!("{name} must be scalar")));
            }
        }
        let ld = self.nodes[scale_density.0].value.item();
        let ly = self.nodes[scale_data.0].value.item();
        let mut out = vec![0.0; 2 * k];
        let mut aux = vec![0.0; 2 * k];
        for i in 0..k {
            let t = grid_start + i as f64 * grid_step;
            let mut h0 = 0.0;
            let mut raw = 0.0;
            let mut sd = 0.0;
            let mut sy = 0.0;
            for (&x, &y) in ctx_x.iter().zip(ctx_y.iter()) {
                let r = t - x;
                let pd = rbf(r, ld);
                let py = rbf(r, ly);
                h0 += pd;
                raw += y * py;
                sd += pd * r * r;
                sy += y * py * r * r;
            }
            out[i] = h0;
            out[k + i] = raw / h0.max(EMBED_EPS);
            aux[i] = sd;
            aux[k + i] = sy;
        }
        Ok(self.push(
            Op::Embed {
                ctx_x: ctx_x.to_vec(),
                ctx_y: ctx_y.to_vec(),
                grid_start,
                grid_step,
                k,
                scale_density,
                scale_data,
                aux,
            },
            Tensor::matrix(2, k, out),
        ))
    }

    /// RBF smoothing of grid values to targets, per segment:
    /// vals [c, segs*k] -> [c, segs*m]. Differentiable in the values and in
    /// the scale.
    pub fn rbf_smooth(
        &mut self,
        vals: ValueId,
        grid_start: f64,
        grid_step: f64,
        k: usize,
        targets: &[f64],
        scale: ValueId,
    ) -> Result<ValueId> {
        let (c, n) = self.nodes[vals.0].value.dims2();
        if k == 0 || n % k != 0 {
            return Err(mismatch("rbf_smooth", format!("vals [{c},{n}], k {k}")));
        }
        if !self.nodes[scale.0].value.is_scalar() {
            return Err(mismatch("rbf_smooth", "scale must be scalar".into()));
        }
        let segs = n / k;
        let m = targets.len();
        let l = self.nodes[scale.0].value.item();
        let mut w = vec![0.0; m * k];
        let mut wd2 = vec![0.0; m * k];
        for (j, &x) in targets.iter().enumerate() {
            for i in 0..k {
                let d = x - (grid_start + i as f64 * grid_step);
                let psi = rbf(d, l);
                w[j * k + i] = psi;
                wd2[j * k + i] = psi * d * d;
            }
        }
        let xv = &self.nodes[vals.0].value.data;
        let mut out = vec![0.0; c * segs * m];
        for ch in 0..c {
            for s in 0..segs {
                let vrow = &xv[ch * n + s * k..ch * n + (s + 1) * k];
                let orow = &mut out[ch * segs * m + s * m..ch * segs * m + (s + 1) * m];
                for (j, o) in orow.iter_mut().enumerate() {
                    let wrow = &w[j * k..(j + 1) * k];
                    let mut acc = 0.0;
                    for (&wv, &vv) in wrow.iter().zip(vrow.iter()) {
                        acc += wv * vv;
                    }
                    *o = acc;
                }
            }
        }
        Ok(self.push(
            Op::RbfSmooth {
                vals,
                scale,
                k,
                targets: targets.to_vec(),
                grid_start,
                grid_step,
                w,
                wd2,
            },
            Tensor::matrix(c, segs * m, out),
        ))
    }

    // ---- structural ops ---------------------------------------------------

    pub fn slice_rows(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = self.require_rank2("slice_rows", x)?;
        if start + len > r {
            return Err(mismatch("slice_rows", format!("[{start},{}) of {r} rows", start + len)));
        }
        let v = &self.nodes[x.0].value.data;
        let data = v[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start, len }, Tensor::matrix(len, c, data)))
    }

    pub fn slice_cols(&mut self, x: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = self.require_rank2("slice_cols", x)?;
        if start + len > c {
            return Err(mismatch("slice_cols", format!("[{start},{}) of {c} cols", start + len)));
        }
        let v = &self.nodes[x.0].value.data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, Tensor::matrix(r, len, data)))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let v = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(mismatch("reshape", format!("{:?} -> {:?}", v.shape, shape)));
        }
        let data = v.data.clone();
        Ok(self.push(Op::Reshape(x), Tensor::new(shape, data)))
    }

    /// Pair every fixed row of `xs` [m,dx] with every row of `z` [l,dz],
    /// producing [l*m, dx+dz] with row l*m+j = [xs_j, z_l].
    pub fn pair_concat(&mut self, xs: Tensor, z: ValueId) -> Result<ValueId> {
        let (m, dx) = xs.dims2();
        let (l, dz) = self.nodes[z.0].value.dims2();
        let zv = &self.nodes[z.0].value.data;
        let mut data = Vec::with_capacity(l * m * (dx + dz));
        for li in 0..l {
            let zrow = &zv[li * dz..(li + 1) * dz];
            for j in 0..m {
                data.extend_from_slice(&xs.data[j * dx..(j + 1) * dx]);
                data.extend_from_slice(zrow);
            }
        }
        Ok(self.push(Op::PairConcat { xs, z }, Tensor::matrix(l * m, dx + dz, data)))
    }

    // ---- backward ---------------------------------------------------------

    fn ensure_grad(&mut self, idx: usize) -> &mut Vec<f64> {
        let n = self.nodes[idx].value.len();
        self.nodes[idx].grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Reverse sweep from a scalar root; leaf gradients accumulate additively.
    pub fn backward(&mut self, root: ValueId) -> Result<()> {
        if !self.evaluated {
            return Err(AutodiffError::BackwardBeforeForward);
        }
        if self.backward_done {
            return Err(AutodiffError::DoubleBackward);
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(self.nodes[root.0].value.shape.clone()));
        }
        self.backward_done = true;
        self.ensure_grad(root.0)[0] = 1.0;
        for idx in (0..=root.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            let node = std::mem::replace(&mut self.nodes[idx], Node::placeholder());
            self.step(&node);
            self.nodes[idx] = node;
        }
        Ok(())
    }

    fn two(&mut self, a: usize, b: usize) -> (&mut Node, &mut Node) {
        assert_ne!(a, b, "aliased inputs in multi-input op");
        if a < b {
            let (lo, hi) = self.nodes.split_at_mut(b);
            (&mut lo[a], &mut hi[0])
        } else {
            let (lo, hi) = self.nodes.split_at_mut(a);
            (&mut hi[0], &mut lo[b])
        }
    }

    fn step(&mut self, node: &Node) {
        let up = node.grad.as_ref().expect("grad present");
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a == b {
                    let g = self.ensure_grad(a.0);
                    for (gi, &u) in g.iter_mut().zip(up.iter()) {
                        *gi += 2.0 * u;
                    }
                } else {
                    for id in [a, b] {
                        let g = self.ensure_grad(id.0);
                        for (gi, &u) in g.iter_mut().zip(up.iter()) {
                            *gi += u;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if a == b {
                    self.ensure_grad(a.0);
                } else {
                    let g = self.ensure_grad(a.0);
                    for (gi, &u) in g.iter_mut().zip(up.iter()) {
                        *gi += u;
                    }
                    let g = self.ensure_grad(b.0);
                    for (gi, &u) in g.iter_mut().zip(up.iter()) {
                        *gi -= u;
                    }
                }
            }
            Op::Mul(a, b) => {
                if a == b {
                    let n = &mut self.nodes[a.0];
                    let nv = n.value.len();
                    let g = n.grad.get_or_insert_with(|| vec![0.0; nv]);
                    for i in 0..up.len() {
                        g[i] += 2.0 * up[i] * n.value.data[i];
                    }
                } else {
                    let (na, nb) = self.two(a.0, b.0);
                    let (la, lb) = (na.value.len(), nb.value.len());
                    let ga = na.grad.get_or_insert_with(|| vec![0.0; la]);
                    for i in 0..up.len() {
                        ga[i] += up[i] * nb.value.data[i];
                    }
                    let gb = nb.grad.get_or_insert_with(|| vec![0.0; lb]);
                    for i in 0..up.len() {
                        gb[i] += up[i] * na.value.data[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let g = self.ensure_grad(a.0);
                for (gi, &u) in g.iter_mut().zip(up.iter()) {
                    *gi += c * u;
                }
            }
            Op::AddConst(a, _) => {
                let g = self.ensure_grad(a.0);
                for (gi, &u) in g.iter_mut().zip(up.iter()) {
                    *gi += u;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, o) = node.value.dims2();
                let i = self.nodes[x.0].value.dims2().1;
                {
                    let (nx, nw) = self.two(x.0, w.0);
                    let lx = nx.value.len();
                    let lw = nw.value.len();
                    if nx.grad.is_none() {
                        nx.grad = Some(vec![0.0; lx]);
                    }
                    if nw.grad.is_none() {
                        nw.grad = Some(vec![0.0; lw]);
                    }
                    let gx = nx.grad.as_mut().unwrap();
                    let gw = nw.grad.as_mut().unwrap();
                    dgemm_rm(n, o, i, up, false, &nw.value.data, false, gx, false);
                    dgemm_rm(o, n, i, up, true, &nx.value.data, false, gw, false);
                }
                let gb = self.ensure_grad(b.0);
                for row in up.chunks(o) {
                    for (g, &u) in gb.iter_mut().zip(row.iter()) {
                        *g += u;
                    }
                }
            }
            Op::PointwiseConv { x, w, b } => {
                let (co, n) = node.value.dims2();
                let ci = self.nodes[x.0].value.dims2().0;
                {
                    let (nx, nw) = self.two(x.0, w.0);
                    let lx = nx.value.len();
                    let lw = nw.value.len();
                    if nx.grad.is_none() {
                        nx.grad = Some(vec![0.0; lx]);
                    }
                    if nw.grad.is_none() {
                        nw.grad = Some(vec![0.0; lw]);
                    }
                    let gx = nx.grad.as_mut().unwrap();
                    let gw = nw.grad.as_mut().unwrap();
                    dgemm_rm(ci, co, n, &nw.value.data, true, up, false, gx, false);
                    dgemm_rm(co, n, ci, up, false, &nx.value.data, true, gw, false);
                }
                let gb = self.ensure_grad(b.0);
                for (c, row) in up.chunks(n).enumerate() {
                    gb[c] += row.iter().sum::<f64>();
                }
            }
            Op::DepthwiseConv { x, w, seg_len } => {
                let (c, n) = node.value.dims2();
                let kw = self.nodes[w.0].value.dims2().1;
                let segs = n / seg_len;
                let (nx, nw) = self.two(x.0, w.0);
                let lx = nx.value.len();
                let lw = nw.value.len();
                if nx.grad.is_none() {
                    nx.grad = Some(vec![0.0; lx]);
                }
                if nw.grad.is_none() {
                    nw.grad = Some(vec![0.0; lw]);
                }
                let gx = nx.grad.as_mut().unwrap();
                let gw = nw.grad.as_mut().unwrap();
                for ch in 0..c {
                    let wrow = &nw.value.data[ch * kw..(ch + 1) * kw];
                    let gwrow = &mut gw[ch * kw..(ch + 1) * kw];
                    for s in 0..segs {
                        let base = ch * n + s * seg_len;
                        let dout = &up[base..base + seg_len];
                        dw_conv_seg_dx(dout, wrow, &mut gx[base..base + seg_len]);
                        dw_conv_seg_dw(dout, &nx.value.data[base..base + seg_len], gwrow);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let n = &mut self.nodes[a.0];
                let nv = n.value.len();
                let g = n.grad.get_or_insert_with(|| vec![0.0; nv]);
                for i in 0..up.len() {
                    g[i] += up[i] * if n.value.data[i] >= 0.0 { 1.0 } else { slope };
                }
            }
            Op::Softplus(a) => {
                let n = &mut self.nodes[a.0];
                let nv = n.value.len();
                let g = n.grad.get_or_insert_with(|| vec![0.0; nv]);
                for i in 0..up.len() {
                    g[i] += up[i] * sigmoid(n.value.data[i]);
                }
            }
            Op::Sigmoid(a) => {
                let g = self.ensure_grad(a.0);
                for i in 0..up.len() {
                    let s = node.value.data[i];
                    g[i] += up[i] * s * (1.0 - s);
                }
            }
            Op::Exp(a) => {
                let g = self.ensure_grad(a.0);
                for i in 0..up.len() {
                    g[i] += up[i] * node.value.data[i];
                }
            }
            Op::Log(a) => {
                let n = &mut self.nodes[a.0];
                let nv = n.value.len();
                let g = n.grad.get_or_insert_with(|| vec![0.0; nv]);
                for i in 0..up.len() {
                    g[i] += up[i] / n.value.data[i];
                }
            }
            Op::Sum(a) => {
                let u = up[0];
                let g = self.ensure_grad(a.0);
                for gi in g.iter_mut() {
                    *gi += u;
                }
            }
            Op::Mean(a) => {
                let len = self.nodes[a.0].value.len() as f64;
                let u = up[0] / len;
                let g = self.ensure_grad(a.0);
                for gi in g.iter_mut() {
                    *gi += u;
                }
            }
            Op::SumCols(a) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let g = self.ensure_grad(a.0);
                for i in 0..r {
                    let u = up[i];
                    for gi in &mut g[i * c..(i + 1) * c] {
                        *gi += u;
                    }
                }
            }
            Op::MeanCols(a) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let g = self.ensure_grad(a.0);
                for i in 0..r {
                    let u = up[i] / c as f64;
                    for gi in &mut g[i * c..(i + 1) * c] {
                        *gi += u;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = self.nodes[a.0].value.dims2();
                let g = self.ensure_grad(a.0);
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += up[j] / r as f64;
                    }
                }
            }
            Op::LogSumExp(a) => {
                let out = node.value.data[0];
                let u = up[0];
                let n = &mut self.nodes[a.0];
                let nv = n.value.len();
                let g = n.grad.get_or_insert_with(|| vec![0.0; nv]);
                for i in 0..nv {
                    g[i] += u * (n.value.data[i] - out).exp();
                }
            }
            Op::GaussianLogPdf { y, mu, sigma } => {
                let (r, m) = node.value.dims2();
                let y_bcast = y.len() == m && r > 1;
                let per_row_sigma = self.nodes[sigma.0].value.len() == r
                    && self.nodes[sigma.0].value.shape.len() == 1
                    && m != r;
                let (nmu, nsig) = self.two(mu.0, sigma.0);
                let (lm, ls) = (nmu.value.len(), nsig.value.len());
                let gmu = nmu.grad.get_or_insert_with(|| vec![0.0; lm]);
                let mut gsig_local = vec![0.0; ls];
                for i in 0..r {
                    for j in 0..m {
                        let idx = i * m + j;
                        let yv = if y_bcast { y.data[j] } else { y.data[idx] };
                        let s = if per_row_sigma {
                            nsig.value.data[i]
                        } else {
                            nsig.value.data[idx]
                        };
                        let d = yv - nmu.value.data[idx];
                        let u = up[idx];
                        gmu[idx] += u * d / (s * s);
                        let gs = u * (d * d / (s * s) - 1.0) / s;
                        if per_row_sigma {
                            gsig_local[i] += gs;
                        } else {
                            gsig_local[idx] += gs;
                        }
                    }
                }
                let gsig = nsig.grad.get_or_insert_with(|| vec![0.0; ls]);
                for (g, l) in gsig.iter_mut().zip(gsig_local.iter()) {
                    *g += l;
                }
            }
            Op::GaussSample { mu, sigma, eps } => {
                let g = self.ensure_grad(mu.0);
                for (gi, &u) in g.iter_mut().zip(up.iter()) {
                    *gi += u;
                }
                let g = self.ensure_grad(sigma.0);
                for i in 0..up.len() {
                    g[i] += up[i] * eps.data[i];
                }
            }
            Op::KlDiagGauss { mu_q, sig_q, mu_p, sig_p } => {
                let u = up[0];
                let n = self.nodes[mu_q.0].value.len();
                let mq = self.nodes[mu_q.0].value.data.clone();
                let sq = self.nodes[sig_q.0].value.data.clone();
                let mp = self.nodes[mu_p.0].value.data.clone();
                let sp = self.nodes[sig_p.0].value.data.clone();
                {
                    let g = self.ensure_grad(mu_q.0);
                    for i in 0..n {
                        g[i] += u * (mq[i] - mp[i]) / (sp[i] * sp[i]);
                    }
                }
                {
                    let g = self.ensure_grad(sig_q.0);
                    for i in 0..n {
                        g[i] += u * (-1.0 / sq[i] + sq[i] / (sp[i] * sp[i]));
                    }
                }
                {
                    let g = self.ensure_grad(mu_p.0);
                    for i in 0..n {
                        g[i] -= u * (mq[i] - mp[i]) / (sp[i] * sp[i]);
                    }
                }
                {
                    let g = self.ensure_grad(sig_p.0);
                    for i in 0..n {
                        let dm = mq[i] - mp[i];
                        g[i] += u
                            * (1.0 / sp[i] - (sq[i] * sq[i] + dm * dm) / (sp[i] * sp[i] * sp[i]));
                    }
                }
            }
            Op::Embed {
                ctx_x: _,
                ctx_y: _,
                grid_start: _,
                grid_step: _,
                k,
                scale_density,
                scale_data,
                aux,
            } => {
                let k = *k;
                let ld = self.nodes[scale_density.0].value.item();
                let ly = self.nodes[scale_data.0].value.item();
                let h0 = &node.value.data[0..k];
                let h1 = &node.value.data[k..2 * k];
                let mut gld = 0.0;
                let mut gly = 0.0;
                for i in 0..k {
                    let den = h0[i].max(EMBED_EPS);
                    let draw = up[k + i] / den;
                    let mut dh0 = up[i];
                    if h0[i] > EMBED_EPS {
                        let raw = h1[i] * den;
                        dh0 -= up[k + i] * raw / (den * den);
                    }
                    gld += dh0 * aux[i] / (ld * ld * ld);
                    gly += draw * aux[k + i] / (ly * ly * ly);
                }
                self.ensure_grad(scale_density.0)[0] += gld;
                self.ensure_grad(scale_data.0)[0] += gly;
            }
            Op::RbfSmooth { vals, scale, k, targets, w, wd2, .. } => {
                let k = *k;
                let m = targets.len();
                let (c, n) = self.nodes[vals.0].value.dims2();
                let segs = n / k;
                let l = self.nodes[scale.0].value.item();
                let xv = self.nodes[vals.0].value.data.clone();
                let mut gl = 0.0;
                {
                    let gx = self.ensure_grad(vals.0);
                    for ch in 0..c {
                        for s in 0..segs {
                            let vbase = ch * n + s * k;
                            let obase = ch * segs * m + s * m;
                            for j in 0..m {
                                let u = up[obase + j];
                                if u == 0.0 {
                                    continue;
                                }
                                let wrow = &w[j * k..(j + 1) * k];
                                let wdrow = &wd2[j * k..(j + 1) * k];
                                let grow = &mut gx[vbase..vbase + k];
                                let vrow = &xv[vbase..vbase + k];
                                let mut acc = 0.0;
                                for i in 0..k {
                                    grow[i] += u * wrow[i];
                                    acc += vrow[i] * wdrow[i];
                                }
                                gl += u * acc;
                            }
                        }
                    }
                }
                self.ensure_grad(scale.0)[0] += gl / (l * l * l);
            }
            Op::SliceRows { x, start, len } => {
                let c = self.nodes[x.0].value.dims2().1;
                let g = self.ensure_grad(x.0);
                let dst = &mut g[start * c..(start + len) * c];
                for (gi, &u) in dst.iter_mut().zip(up.iter()) {
                    *gi += u;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = self.nodes[x.0].value.dims2();
                let g = self.ensure_grad(x.0);
                for i in 0..r {
                    for j in 0..*len {
                        g[i * c + start + j] += up[i * len + j];
                    }
                }
            }
            Op::Reshape(x) => {
                let g = self.ensure_grad(x.0);
                for (gi, &u) in g.iter_mut().zip(up.iter()) {
                    *gi += u;
                }
            }
            Op::PairConcat { xs, z } => {
                let (m, dx) = xs.dims2();
                let (l, dz) = self.nodes[z.0].value.dims2();
                let g = self.ensure_grad(z.0);
                for li in 0..l {
                    for j in 0..m {
                        let row = &up[(li * m + j) * (dx + dz) + dx..(li * m + j + 1) * (dx + dz)];
                        let gz = &mut g[li * dz..(li + 1) * dz];
                        for (gi, &u) in gz.iter_mut().zip(row.iter()) {
                            *gi += u;
                        }
                    }
                }
            }
        }
    }
}

/// Guard for the density-channel normalization.
pub const EMBED_EPS: f64 = 1e-8;
