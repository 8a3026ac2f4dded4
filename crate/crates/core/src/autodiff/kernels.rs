//! Forward and adjoint kernels for the windowed primitives recorded on the tape.
//!
//! A tensor convolution is lowered per sample to a window gather followed by
//! one matrix product: rows run over `(y, x, a)` (output position and the
//! uncontracted leading cell index), columns over `(c, ky, kx, k)` (input
//! channel, kernel offset and contracted cell index). Each output cell is thus
//! the sum over the `k×k×m` window of the per-cell contractions.

use crate::exec;
use crate::layers::ConvGeometry;
use crate::tensor::gemm::gemm;
use crate::tensor::{ContractionLayout, Shape, Tensor};
use crate::{Error, Real, Result};

/// Samples handled per reduction group in weight-gradient accumulation. Fixed
/// so that results never depend on the thread count.
const GRAD_GROUP: usize = 8;

#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    ho: usize,
    wo: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cell: ContractionLayout,
    in_cell_len: usize,
    out_dims: Vec<usize>,
}

impl ConvPlan {
    /// `x`: `[N, C, H, W, cell..]`, `w`: `[O, C, k, k, wcell..]`.
    pub fn new(x_dims: &[usize], w_dims: &[usize], geom: ConvGeometry, r: usize) -> Result<Self> {
        if x_dims.len() < 4 || w_dims.len() < 4 {
            return Err(Error::ShapeMismatch(format!(
                "convolution needs [N,C,H,W,..] input and [O,C,k,k,..] weight, got {x_dims:?} and {w_dims:?}"
            )));
        }
        let (batch, in_ch, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
        if w_dims[1] != in_ch {
            return Err(Error::ShapeMismatch(format!(
                "weight expects {} input channels, feature map has {in_ch}",
                w_dims[1]
            )));
        }
        if w_dims[2] != geom.kernel || w_dims[3] != geom.kernel {
            return Err(Error::ShapeMismatch(format!(
                "weight spatial extent {}×{} does not match kernel {}",
                w_dims[2], w_dims[3], geom.kernel
            )));
        }
        let ho = geom.output_extent(h)?;
        let wo = geom.output_extent(w)?;
        let cell = ContractionLayout::new(&x_dims[4..], &w_dims[4..], r)?;
        let mut out_dims = vec![batch, w_dims[0], ho, wo];
        out_dims.extend_from_slice(&cell.out_dims);
        Ok(ConvPlan {
            batch,
            in_ch,
            h,
            w,
            out_ch: w_dims[0],
            ho,
            wo,
            k: geom.kernel,
            stride: geom.stride,
            pad: geom.pad,
            in_cell_len: x_dims[4..].iter().product(),
            cell,
            out_dims,
        })
    }

    fn rows(&self) -> usize {
        self.ho * self.wo * self.cell.a_len
    }

    fn cols(&self) -> usize {
        self.in_ch * self.k * self.k * self.cell.k_len
    }

    fn out_cols(&self) -> usize {
        self.out_ch * self.cell.p_len
    }

    fn in_sample_len(&self) -> usize {
        self.in_ch * self.h * self.w * self.in_cell_len
    }

    fn out_sample_len(&self) -> usize {
        self.rows() * self.out_cols()
    }

    /// Weight as a `[cols, O·P]` matrix.
    fn weight_matrix(&self, w: &[Real]) -> Vec<Real> {
        let (kk, p, op) = (self.cell.k_len, self.cell.p_len, self.out_cols());
        let mut wm = vec![0.0; self.cols() * op];
        for o in 0..self.out_ch {
            for c in 0..self.in_ch {
                for i in 0..self.k {
                    for j in 0..self.k {
                        let base_w = (((o * self.in_ch + c) * self.k + i) * self.k + j) * kk;
                        let base_col = ((c * self.k + i) * self.k + j) * kk;
                        for (kq, &src) in self.cell.kperm.iter().enumerate() {
                            let from = (base_w + src) * p;
                            let to = (base_col + kq) * op + o * p;
                            wm[to..to + p].copy_from_slice(&w[from..from + p]);
                        }
                    }
                }
            }
        }
        wm
    }

    fn weight_from_matrix(&self, wm: &[Real]) -> Vec<Real> {
        let (kk, p, op) = (self.cell.k_len, self.cell.p_len, self.out_cols());
        let mut w = vec![0.0; wm.len()];
        for o in 0..self.out_ch {
            for c in 0..self.in_ch {
                for i in 0..self.k {
                    for j in 0..self.k {
                        let base_w = (((o * self.in_ch + c) * self.k + i) * self.k + j) * kk;
                        let base_col = ((c * self.k + i) * self.k + j) * kk;
                        for (kq, &dst) in self.cell.kperm.iter().enumerate() {
                            let to = (base_w + dst) * p;
                            let from = (base_col + kq) * op + o * p;
                            w[to..to + p].copy_from_slice(&wm[from..from + p]);
                        }
                    }
                }
            }
        }
        w
    }

    /// Visit every (patch offset, input offset) pair of contiguous `K`-runs.
    fn for_each_window_run(&self, mut f: impl FnMut(usize, usize)) {
        let (a_len, kk, cols) = (self.cell.a_len, self.cell.k_len, self.cols());
        for y in 0..self.ho {
            for x in 0..self.wo {
                for c in 0..self.in_ch {
                    for i in 0..self.k {
                        let yy = (y * self.stride + i) as isize - self.pad as isize;
                        if yy < 0 || yy >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.k {
                            let xx = (x * self.stride + j) as isize - self.pad as isize;
                            if xx < 0 || xx >= self.w as isize {
                                continue;
                            }
                            let src = ((c * self.h + yy as usize) * self.w + xx as usize)
                                * self.in_cell_len;
                            let col = ((c * self.k + i) * self.k + j) * kk;
                            for a in 0..a_len {
                                let row = (y * self.wo + x) * a_len + a;
                                f(row * cols + col, src + a * kk);
                            }
                        }
                    }
                }
            }
        }
    }

    fn gather(&self, x_n: &[Real], pm: &mut [Real]) {
        pm.fill(0.0);
        let kk = self.cell.k_len;
        self.for_each_window_run(|dst, src| {
            pm[dst..dst + kk].copy_from_slice(&x_n[src..src + kk]);
        });
    }

    fn scatter_add(&self, dpm: &[Real], dx_n: &mut [Real]) {
        let kk = self.cell.k_len;
        self.for_each_window_run(|from, to| {
            for (d, s) in dx_n[to..to + kk].iter_mut().zip(&dpm[from..from + kk]) {
                *d += s;
            }
        });
    }

    /// `[rows, O·P]` product layout to the `[O, Ho, Wo, A, P]` sample layout.
    fn rows_to_output(&self, r: &[Real], y_n: &mut [Real]) {
        let (p, op, rows) = (self.cell.p_len, self.out_cols(), self.rows());
        for o in 0..self.out_ch {
            for row in 0..rows {
                let to = (o * rows + row) * p;
                let from = row * op + o * p;
                y_n[to..to + p].copy_from_slice(&r[from..from + p]);
            }
        }
    }

    fn output_to_rows(&self, dy_n: &[Real], r: &mut [Real]) {
        let (p, op, rows) = (self.cell.p_len, self.out_cols(), self.rows());
        for o in 0..self.out_ch {
            for row in 0..rows {
                let from = (o * rows + row) * p;
                let to = row * op + o * p;
                r[to..to + p].copy_from_slice(&dy_n[from..from + p]);
            }
        }
    }
}

pub(crate) fn conv_forward(plan: &ConvPlan, x: &Tensor, w: &Tensor) -> Tensor {
    let wm = plan.weight_matrix(w.data());
    let (rows, cols, op) = (plan.rows(), plan.cols(), plan.out_cols());
    let in_len = plan.in_sample_len();
    let mut out = vec![0.0; plan.batch * plan.out_sample_len()];
    exec::for_each_chunk(&mut out, plan.out_sample_len(), |n, y_n| {
        let x_n = &x.data()[n * in_len..(n + 1) * in_len];
        let mut pm = vec![0.0; rows * cols];
        plan.gather(x_n, &mut pm);
        let mut r = vec![0.0; rows * op];
        gemm(rows, cols, op, 1.0, &pm, cols, 1, &wm, op, 1, 0.0, &mut r, op, 1);
        plan.rows_to_output(&r, y_n);
    });
    Tensor::from_parts(Shape::new(plan.out_dims.clone()).expect("valid"), out)
}

pub(crate) fn conv_backward(
    plan: &ConvPlan,
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let wm = plan.weight_matrix(w.data());
    let (rows, cols, op) = (plan.rows(), plan.cols(), plan.out_cols());
    let (in_len, out_len) = (plan.in_sample_len(), plan.out_sample_len());

    let mut dx = need_x.then(|| vec![0.0; plan.batch * in_len]);
    if let Some(dx) = dx.as_mut() {
        exec::for_each_chunk(dx, in_len, |n, dx_n| {
            let mut dr = vec![0.0; rows * op];
            plan.output_to_rows(&dy.data()[n * out_len..(n + 1) * out_len], &mut dr);
            let mut dpm = vec![0.0; rows * cols];
            // dR [rows, OP] · Wmᵀ [OP, cols]
            gemm(rows, op, cols, 1.0, &dr, op, 1, &wm, 1, op, 0.0, &mut dpm, cols, 1);
            plan.scatter_add(&dpm, dx_n);
        });
    }

    let dw = need_w.then(|| {
        let mut acc = vec![0.0; cols * op];
        for start in (0..plan.batch).step_by(GRAD_GROUP) {
            let end = (start + GRAD_GROUP).min(plan.batch);
            let partials = exec::map(end - start, |t| {
                let n = start + t;
                let mut pm = vec![0.0; rows * cols];
                plan.gather(&x.data()[n * in_len..(n + 1) * in_len], &mut pm);
                let mut dr = vec![0.0; rows * op];
                plan.output_to_rows(&dy.data()[n * out_len..(n + 1) * out_len], &mut dr);
                let mut part = vec![0.0; cols * op];
                // Pmᵀ [cols, rows] · dR [rows, OP]
                gemm(cols, rows, op, 1.0, &pm, 1, cols, &dr, op, 1, 0.0, &mut part, op, 1);
                part
            });
            for part in partials {
                for (a, b) in acc.iter_mut().zip(&part) {
                    *a += b;
                }
            }
        }
        Tensor::from_parts(w.shape().clone(), plan.weight_from_matrix(&acc))
    });

    let dx = dx.map(|d| Tensor::from_parts(x.shape().clone(), d));
    (dx, dw)
}

/// Strided spatial subsampling that picks the centre cell of each conv window.
#[derive(Clone, Debug)]
pub(crate) struct SubsamplePlan {
    outer: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    offset: usize,
    stride: usize,
    cell: usize,
    out_dims: Vec<usize>,
}

impl SubsamplePlan {
    pub fn new(x_dims: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x_dims.len() < 4 {
            return Err(Error::ShapeMismatch(format!(
                "subsample needs [N,C,H,W,..], got {x_dims:?}"
            )));
        }
        let offset = geom.centre_offset()?;
        let (h, w) = (x_dims[2], x_dims[3]);
        let ho = geom.output_extent(h)?;
        let wo = geom.output_extent(w)?;
        let mut out_dims = x_dims.to_vec();
        out_dims[2] = ho;
        out_dims[3] = wo;
        Ok(SubsamplePlan {
            outer: x_dims[0] * x_dims[1],
            h,
            w,
            ho,
            wo,
            offset,
            stride: geom.stride,
            cell: x_dims[4..].iter().product(),
            out_dims,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        for o in 0..self.outer {
            for y in 0..self.ho {
                for x in 0..self.wo {
                    let src = ((o * self.h + self.offset + y * self.stride) * self.w
                        + self.offset
                        + x * self.stride)
                        * self.cell;
                    let dst = ((o * self.ho + y) * self.wo + x) * self.cell;
                    f(dst, src);
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = vec![0.0; self.outer * self.ho * self.wo * self.cell];
        let c = self.cell;
        self.for_each(|dst, src| out[dst..dst + c].copy_from_slice(&x.data()[src..src + c]));
        Tensor::from_parts(Shape::new(self.out_dims.clone()).expect("valid"), out)
    }

    pub fn backward(&self, x_shape: &Shape, dy: &Tensor) -> Tensor {
        let mut dx = vec![0.0; x_shape.numel()];
        let c = self.cell;
        self.for_each(|dst, src| {
            for (d, s) in dx[src..src + c].iter_mut().zip(&dy.data()[dst..dst + c]) {
                *d += s;
            }
        });
        Tensor::from_parts(x_shape.clone(), dx)
    }
}

/// `(N, C, inner)` view of a `[N, C, ..]` tensor.
pub(crate) fn channel_layout(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "expected [N, C, ..], got {dims:?}"
        )));
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

pub(crate) fn channel_bias_forward(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c, inner) = channel_layout(x.dims())?;
    if b.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "bias of {} entries for {c} channels",
            b.len()
        )));
    }
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let bc = b.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += bc);
    }
    debug_assert_eq!(out.len(), n * c * inner);
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

pub(crate) fn channel_bias_backward(x_dims: &[usize], b: &Tensor, dy: &Tensor) -> Tensor {
    let (_, c, inner) = channel_layout(x_dims).expect("checked in forward");
    let mut db = vec![0.0; c];
    for (i, chunk) in dy.data().chunks(inner).enumerate() {
        db[i % c] += chunk.iter().sum::<Real>();
    }
    Tensor::from_parts(b.shape().clone(), db)
}

pub(crate) fn prelu_forward(x: &Tensor, slope: &Tensor) -> Result<Tensor> {
    let (_, c, inner) = channel_layout(x.dims())?;
    if slope.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "PReLU has {} slopes for {c} channels",
            slope.len()
        )));
    }
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(inner).enumerate() {
        let a = slope.data()[i % c];
        chunk.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v *= a);
    }
    Ok(Tensor::from_parts(x.shape().clone(), out))
}

/// Derivative at exactly zero uses the negative-side slope.
pub(crate) fn prelu_backward(x: &Tensor, slope: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let (_, c, inner) = channel_layout(x.dims()).expect("checked in forward");
    let mut dx = dy.data().to_vec();
    let mut da = vec![0.0; c];
    for (i, (dxc, xc)) in dx.chunks_mut(inner).zip(x.data().chunks(inner)).enumerate() {
        let ch = i % c;
        let a = slope.data()[ch];
        for (d, &xv) in dxc.iter_mut().zip(xc) {
            if xv <= 0.0 {
                da[ch] += *d * xv;
                *d *= a;
            }
        }
    }
    (
        Tensor::from_parts(x.shape().clone(), dx),
        Tensor::from_parts(slope.shape().clone(), da),
    )
}

/// `(N, C, S, Q)` view for normalization: statistics are per `(c, q)` over
/// batch and spatial positions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct NormLayout {
    pub n: usize,
    pub c: usize,
    pub s: usize,
    pub q: usize,
}

impl NormLayout {
    pub fn new(x_dims: &[usize], params: usize) -> Result<Self> {
        if x_dims.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "batch norm needs [N, C, ..], got {x_dims:?}"
            )));
        }
        let (n, c) = (x_dims[0], x_dims[1]);
        // spatial axes are H, W when present; everything after is the cell
        let (s, q) = if x_dims.len() >= 4 {
            (x_dims[2] * x_dims[3], x_dims[4..].iter().product())
        } else {
            (1, x_dims[2..].iter().product())
        };
        if params != c * q {
            return Err(Error::ShapeMismatch(format!(
                "batch norm has {params} affine entries, feature map needs {}",
                c * q
            )));
        }
        Ok(NormLayout { n, c, s, q })
    }

    pub fn count(&self) -> usize {
        self.n * self.s
    }

    /// Visit each contiguous run of `q` cell components with its channel.
    fn runs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n * self.c * self.s).map(move |i| ((i / self.s) % self.c, i * self.q))
    }

    /// Per-(c, q) mean and biased variance.
    pub fn moments(&self, x: &[Real]) -> (Vec<Real>, Vec<Real>) {
        let cq = self.c * self.q;
        let m = self.count() as Real;
        let mut mean = vec![0.0; cq];
        for (ch, off) in self.runs() {
            for (acc, v) in mean[ch * self.q..(ch + 1) * self.q].iter_mut().zip(&x[off..off + self.q]) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![0.0; cq];
        for (ch, off) in self.runs() {
            let mu = &mean[ch * self.q..(ch + 1) * self.q];
            for ((acc, v), mu) in var[ch * self.q..(ch + 1) * self.q].iter_mut().zip(&x[off..off + self.q]).zip(mu) {
                *acc += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        (mean, var)
    }
}

pub(crate) struct NormOutput {
    pub y: Tensor,
    pub xhat: Tensor,
    pub inv_std: Vec<Real>,
}

pub(crate) fn norm_forward(
    layout: NormLayout,
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[Real],
    var: &[Real],
    eps: Real,
) -> NormOutput {
    let q = layout.q;
    let inv_std: Vec<Real> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (ch, off) in layout.runs() {
        let p = ch * q;
        for j in 0..q {
            let h = (x.data()[off + j] - mean[p + j]) * inv_std[p + j];
            xhat[off + j] = h;
            y[off + j] = gamma.data()[p + j] * h + beta.data()[p + j];
        }
    }
    NormOutput {
        y: Tensor::from_parts(x.shape().clone(), y),
        xhat: Tensor::from_parts(x.shape().clone(), xhat),
        inv_std,
    }
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` the mean and variance are
/// treated as functions of `x`; otherwise they are constants.
pub(crate) fn norm_backward(
    layout: NormLayout,
    xhat: &Tensor,
    gamma: &Tensor,
    inv_std: &[Real],
    dy: &Tensor,
    batch_stats: bool,
) -> (Tensor, Tensor, Tensor) {
    let q = layout.q;
    let cq = layout.c * q;
    let mut sum_dy = vec![0.0; cq];
    let mut sum_dy_xhat = vec![0.0; cq];
    for (ch, off) in layout.runs() {
        let p = ch * q;
        for j in 0..q {
            let d = dy.data()[off + j];
            sum_dy[p + j] += d;
            sum_dy_xhat[p + j] += d * xhat.data()[off + j];
        }
    }
    let m = layout.count() as Real;
    let mut dx = vec![0.0; dy.len()];
    for (ch, off) in layout.runs() {
        let p = ch * q;
        for j in 0..q {
            let g = gamma.data()[p + j] * inv_std[p + j];
            let d = dy.data()[off + j];
            dx[off + j] = if batch_stats {
                g / m * (m * d - sum_dy[p + j] - xhat.data()[off + j] * sum_dy_xhat[p + j])
            } else {
                g * d
            };
        }
    }
    (
        Tensor::from_parts(dy.shape().clone(), dx),
        Tensor::from_parts(gamma.shape().clone(), sum_dy_xhat),
        Tensor::from_parts(gamma.shape().clone(), sum_dy),
    )
}

/// Row-wise softmax of `[N, C]` logits with max subtraction, plus mean loss.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Real, Tensor)> {
    if logits.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy expects [N, C] logits, got {}",
            logits.shape()
        )));
    }
    let (n, c) = (logits.dims()[0], logits.dims()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut probs = vec![0.0; n * c];
    let mut loss = 0.0;
    for (i, (row, &label)) in logits.data().chunks(c).zip(labels).enumerate() {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut z = 0.0;
        for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
            *p = (v - max).exp();
            z += *p;
        }
        probs[i * c..(i + 1) * c].iter_mut().for_each(|p| *p /= z);
        loss += z.ln() - (row[label] - max);
    }
    Ok((loss / n as Real, Tensor::from_parts(logits.shape().clone(), probs)))
}
