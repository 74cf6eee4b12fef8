//! Network operators: stride-one convolution and its adjoints, non-overlapping
//! max pooling with recorded argmax offsets, unpooling, flattening, the
//! generalized dot product and the hard-sigmoid activations.
//!
//! Spatial operators take `[C, H, W]` or batched `[B, C, H, W]` inputs and
//! map independently over the batch. Reductions over the batch (weight and
//! bias gradients) are plain sums in batch order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b` (borrow rules).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Spatial geometry of a batched `[B, C, H, W]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dims {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    batched: bool,
}

fn spatial_dims(t: &Tensor, op: &'static str) -> Result<Dims> {
    match *t.shape() {
        [c, h, w] => Ok(Dims {
            batch: 1,
            channels: c,
            height: h,
            width: w,
            batched: false,
        }),
        [b, c, h, w] => Ok(Dims {
            batch: b,
            channels: c,
            height: h,
            width: w,
            batched: true,
        }),
        _ => Err(Error::shape(op, "[C, H, W] or [B, C, H, W]", t.shape())),
    }
}

fn out_shape(batched: bool, batch: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    if batched {
        vec![batch, c, h, w]
    } else {
        vec![c, h, w]
    }
}

fn kernel_dims(w: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [co, ci, f1, f2] if f1 == f2 && f1 > 0 => Ok((co, ci, f1)),
        _ => Err(Error::shape(
            op,
            "[C_out, C_in, F, F] with F > 0",
            w.shape(),
        )),
    }
}

fn conv_out_extent(
    extent: usize,
    padding: usize,
    kernel: usize,
    op: &'static str,
) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::invalid(
            op,
            format!("kernel {kernel} larger than padded extent {padded}"),
        ));
    }
    Ok(padded - kernel + 1)
}

/// Unfolds one `[C, H, W]` sample into a `[C*F*F, Ho*Wo]` patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for i in 0..f {
            for j in 0..f {
                let row = &mut cols[((ci * f + i) * f + j) * hw_out..][..hw_out];
                for oh in 0..ho {
                    let ih = oh + i;
                    let dst = &mut row[oh * wo..(oh + 1) * wo];
                    if ih < pad || ih - pad >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[(ih - pad) * w..(ih - pad + 1) * w];
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = ow + j;
                        *d = if iw < pad || iw - pad >= w {
                            0.0
                        } else {
                            src[iw - pad]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into a sample.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let hw_out = ho * wo;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for i in 0..f {
            for j in 0..f {
                let row = &cols[((ci * f + i) * f + j) * hw_out..][..hw_out];
                for oh in 0..ho {
                    let ih = oh + i;
                    if ih < pad || ih - pad >= h {
                        continue;
                    }
                    let dst = &mut plane[(ih - pad) * w..(ih - pad + 1) * w];
                    for (ow, &v) in row[oh * wo..(oh + 1) * wo].iter().enumerate() {
                        let iw = ow + j;
                        if iw >= pad && iw - pad < w {
                            dst[iw - pad] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Stride-one 2-D cross-correlation with zero padding and a channel-wise bias:
/// `y[c,h,w] = bias[c] + sum_{i,j,k} w[c,i,j,k] * x_pad[i, j+h, k+w]`.
pub fn conv2d(w: &Tensor, x: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv2d";
    let (co, ci, f) = kernel_dims(w, OP)?;
    let d = spatial_dims(x, OP)?;
    if d.channels != ci {
        return Err(Error::shape(
            OP,
            format!("input with {ci} channels"),
            x.shape(),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(OP, [co], b.shape()));
        }
    }
    let ho = conv_out_extent(d.height, padding, f, OP)?;
    let wo = conv_out_extent(d.width, padding, f, OP)?;
    let k = ci * f * f;
    let hw_out = ho * wo;
    let mut cols = vec![0.0; k * hw_out];
    let mut out = vec![0.0; d.batch * co * hw_out];
    for b in 0..d.batch {
        im2col(
            x.sample_unchecked(b, d),
            ci,
            d.height,
            d.width,
            f,
            padding,
            ho,
            wo,
            &mut cols,
        );
        let dst = &mut out[b * co * hw_out..(b + 1) * co * hw_out];
        if let Some(bias) = bias {
            for (c, chunk) in dst.chunks_mut(hw_out).enumerate() {
                chunk.fill(bias.data()[c]);
            }
        }
        gemm(co, k, hw_out, 1.0, w.data(), false, &cols, false, 1.0, dst);
    }
    Ok(Tensor::from_parts(
        out_shape(d.batched, d.batch, co, ho, wo),
        out,
    ))
}

/// Transpose convolution: the adjoint of [`conv2d`] (bias excluded) with
/// respect to its input, applied to `y`. Returns a tensor with the conv input
/// shape.
pub fn conv2d_transpose(w: &Tensor, y: &Tensor, padding: usize) -> Result<Tensor> {
    const OP: &str = "conv2d_transpose";
    let (co, ci, f) = kernel_dims(w, OP)?;
    let d = spatial_dims(y, OP)?;
    if d.channels != co {
        return Err(Error::shape(
            OP,
            format!("upstream with {co} channels"),
            y.shape(),
        ));
    }
    let h = (d.height + f - 1)
        .checked_sub(2 * padding)
        .filter(|&h| h > 0)
        .ok_or_else(|| {
            Error::invalid(
                OP,
                format!("padding {padding} too large for output {:?}", y.shape()),
            )
        })?;
    let wd = (d.width + f - 1)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| {
            Error::invalid(
                OP,
                format!("padding {padding} too large for output {:?}", y.shape()),
            )
        })?;
    let k = ci * f * f;
    let hw_out = d.height * d.width;
    let mut cols = vec![0.0; k * hw_out];
    let mut out = vec![0.0; d.batch * ci * h * wd];
    for b in 0..d.batch {
        let yb = y.sample_unchecked(b, d);
        gemm(
            k,
            co,
            hw_out,
            1.0,
            w.data(),
            true,
            yb,
            false,
            0.0,
            &mut cols,
        );
        col2im(
            &cols,
            ci,
            h,
            wd,
            f,
            padding,
            d.height,
            d.width,
            &mut out[b * ci * h * wd..(b + 1) * ci * h * wd],
        );
    }
    Ok(Tensor::from_parts(
        out_shape(d.batched, d.batch, ci, h, wd),
        out,
    ))
}

/// Gradients of `gdot(upstream, conv2d(w, x, bias, padding))` with respect to
/// the kernel and the bias, summed over the batch.
pub fn conv2d_weight_grad(
    upstream: &Tensor,
    x: &Tensor,
    padding: usize,
    kernel: usize,
) -> Result<(Tensor, Tensor)> {
    const OP: &str = "conv2d_weight_grad";
    let du = spatial_dims(upstream, OP)?;
    let dx = spatial_dims(x, OP)?;
    if du.batch != dx.batch || du.batched != dx.batched {
        return Err(Error::shape(OP, upstream.shape(), x.shape()));
    }
    if kernel == 0 {
        return Err(Error::invalid(OP, "kernel size must be positive"));
    }
    let ho = conv_out_extent(dx.height, padding, kernel, OP)?;
    let wo = conv_out_extent(dx.width, padding, kernel, OP)?;
    if (du.height, du.width) != (ho, wo) {
        return Err(Error::shape(
            OP,
            format!("upstream spatial extent ({ho}, {wo})"),
            upstream.shape(),
        ));
    }
    let (co, ci, f) = (du.channels, dx.channels, kernel);
    let k = ci * f * f;
    let hw_out = ho * wo;
    let mut cols = vec![0.0; k * hw_out];
    let mut dw = vec![0.0; co * k];
    let mut db = vec![0.0; co];
    for b in 0..dx.batch {
        im2col(
            x.sample_unchecked(b, dx),
            ci,
            dx.height,
            dx.width,
            f,
            padding,
            ho,
            wo,
            &mut cols,
        );
        let ub = upstream.sample_unchecked(b, du);
        gemm(co, hw_out, k, 1.0, ub, false, &cols, true, 1.0, &mut dw);
        for (c, chunk) in ub.chunks(hw_out).enumerate() {
            db[c] += chunk.iter().sum::<f64>();
        }
    }
    Ok((
        Tensor::from_parts(vec![co, ci, f, f], dw),
        Tensor::from_parts(vec![co], db),
    ))
}

impl Tensor {
    fn sample_unchecked(&self, b: usize, d: Dims) -> &[f64] {
        let n = d.channels * d.height * d.width;
        &self.data()[b * n..(b + 1) * n]
    }
}

/// Argmax offsets `(i*, j*)` of every non-overlapping `F x F` pooling window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolIndices {
    pooled_shape: Vec<usize>,
    input_hw: (usize, usize),
    pool: usize,
    offsets: Vec<u16>,
}

impl PoolIndices {
    /// Shape of the pooled tensor these indices belong to.
    pub fn pooled_shape(&self) -> &[usize] {
        &self.pooled_shape
    }

    pub fn pool(&self) -> usize {
        self.pool
    }

    /// Spatial extents of the pre-pool tensor.
    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Offset `(i*, j*)` of the maximum for flat pooled position `k`.
    pub fn offset(&self, k: usize) -> (usize, usize) {
        let o = self.offsets[k] as usize;
        (o / self.pool, o % self.pool)
    }

    fn input_shape(&self) -> Vec<usize> {
        let mut s = self.pooled_shape.clone();
        let r = s.len();
        s[r - 2] = self.input_hw.0;
        s[r - 1] = self.input_hw.1;
        s
    }
}

/// Max pooling with stride and filter size `pool`. Ties resolve to the first
/// maximum in row-major window order.
pub fn maxpool(x: &Tensor, pool: usize) -> Result<(Tensor, PoolIndices)> {
    const OP: &str = "maxpool";
    let d = spatial_dims(x, OP)?;
    if pool == 0 || pool > u16::MAX as usize / pool {
        return Err(Error::invalid(OP, format!("unsupported pool size {pool}")));
    }
    if d.height % pool != 0 || d.width % pool != 0 {
        return Err(Error::invalid(
            OP,
            format!(
                "spatial extent {}x{} not divisible by pool size {pool}",
                d.height, d.width
            ),
        ));
    }
    let (ho, wo) = (d.height / pool, d.width / pool);
    let planes = d.batch * d.channels;
    let mut values = Vec::with_capacity(planes * ho * wo);
    let mut offsets = Vec::with_capacity(planes * ho * wo);
    for plane in x.data().chunks(d.height * d.width) {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0u16;
                for i in 0..pool {
                    let row = &plane[(oh * pool + i) * d.width + ow * pool..][..pool];
                    for (j, &v) in row.iter().enumerate() {
                        if v > best {
                            best = v;
                            arg = (i * pool + j) as u16;
                        }
                    }
                }
                values.push(best);
                offsets.push(arg);
            }
        }
    }
    let pooled_shape = out_shape(d.batched, d.batch, d.channels, ho, wo);
    Ok((
        Tensor::from_parts(pooled_shape.clone(), values),
        PoolIndices {
            pooled_shape,
            input_hw: (d.height, d.width),
            pool,
            offsets,
        },
    ))
}

/// Places each entry of `y` at the recorded argmax of its window, zeros
/// elsewhere.
pub fn unpool(y: &Tensor, ind: &PoolIndices) -> Result<Tensor> {
    if y.shape() != ind.pooled_shape.as_slice() {
        return Err(Error::shape("unpool", &ind.pooled_shape, y.shape()));
    }
    let (h, w) = ind.input_hw;
    let p = ind.pool;
    let (ho, wo) = (h / p, w / p);
    let mut out = vec![0.0; y.len() * p * p];
    for (plane_idx, (src, dst)) in y
        .data()
        .chunks(ho * wo)
        .zip(out.chunks_mut(h * w))
        .enumerate()
    {
        for (k, &v) in src.iter().enumerate() {
            let (i, j) = ind.offset(plane_idx * ho * wo + k);
            let (oh, ow) = (k / wo, k % wo);
            dst[(oh * p + i) * w + ow * p + j] = v;
        }
    }
    Ok(Tensor::from_parts(ind.input_shape(), out))
}

/// Reads `x` at the recorded argmax positions: the adjoint of [`unpool`].
pub fn pool_at(x: &Tensor, ind: &PoolIndices) -> Result<Tensor> {
    let expected = ind.input_shape();
    if x.shape() != expected.as_slice() {
        return Err(Error::shape("pool_at", expected, x.shape()));
    }
    let (h, w) = ind.input_hw;
    let p = ind.pool;
    let (ho, wo) = (h / p, w / p);
    let mut out = Vec::with_capacity(ind.len());
    for (plane_idx, src) in x.data().chunks(h * w).enumerate() {
        for k in 0..ho * wo {
            let (i, j) = ind.offset(plane_idx * ho * wo + k);
            let (oh, ow) = (k / wo, k % wo);
            out.push(src[(oh * p + i) * w + ow * p + j]);
        }
    }
    Ok(Tensor::from_parts(ind.pooled_shape.clone(), out))
}

/// Row-major reshape of `[C, H, W]` to `[1, C*H*W]`, or `[B, C, H, W]` to
/// `[B, C*H*W]`. Two-dimensional inputs are returned unchanged.
pub fn flatten(x: &Tensor) -> Result<Tensor> {
    match *x.shape() {
        [_, _] => Ok(x.clone()),
        [c, h, w] => x.clone().reshape(&[1, c * h * w]),
        [b, c, h, w] => x.clone().reshape(&[b, c * h * w]),
        _ => Err(Error::shape("flatten", "rank 2, 3 or 4", x.shape())),
    }
}

/// Inverse of [`flatten`]: `[B, C*H*W]` back to `[B, C, H, W]`.
pub fn unflatten(x: &Tensor, chw: (usize, usize, usize)) -> Result<Tensor> {
    let (c, h, w) = chw;
    match *x.shape() {
        [b, d] if d == c * h * w => x.clone().reshape(&[b, c, h, w]),
        _ => Err(Error::shape(
            "unflatten",
            format!("[B, {}]", c * h * w),
            x.shape(),
        )),
    }
}

/// Generalized dot product: sum of entrywise products of equal-shape tensors.
pub fn gdot(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_shape(b, "gdot")?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

/// `[B, I] x [O, I]^T -> [B, O]`, plus optional bias of length `O`.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, i) = match *x.shape() {
        [b, i] => (b, i),
        _ => return Err(Error::shape("linear", "[B, I]", x.shape())),
    };
    let o = match *w.shape() {
        [o, wi] if wi == i => o,
        _ => return Err(Error::shape("linear", format!("[O, {i}]"), w.shape())),
    };
    let mut out = vec![0.0; b * o];
    if let Some(bias) = bias {
        if bias.shape() != [o] {
            return Err(Error::shape("linear", [o], bias.shape()));
        }
        for row in out.chunks_mut(o) {
            row.copy_from_slice(bias.data());
        }
    }
    gemm(b, i, o, 1.0, x.data(), false, w.data(), true, 1.0, &mut out);
    Ok(Tensor::from_parts(vec![b, o], out))
}

/// `[B, O] x [O, I] -> [B, I]`: the transpose of [`linear`] without bias.
pub fn linear_transpose(y: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (b, o) = match *y.shape() {
        [b, o] => (b, o),
        _ => return Err(Error::shape("linear_transpose", "[B, O]", y.shape())),
    };
    let i = match *w.shape() {
        [wo, i] if wo == o => i,
        _ => {
            return Err(Error::shape(
                "linear_transpose",
                format!("[{o}, I]"),
                w.shape(),
            ))
        }
    };
    let mut out = vec![0.0; b * i];
    gemm(
        b,
        o,
        i,
        1.0,
        y.data(),
        false,
        w.data(),
        false,
        0.0,
        &mut out,
    );
    Ok(Tensor::from_parts(vec![b, i], out))
}

/// Batch-summed outer products `sum_b post_b (x) pre_b`, shaped `[O, I]`.
pub fn outer_sum(post: &Tensor, pre: &Tensor) -> Result<Tensor> {
    match (post.shape(), pre.shape()) {
        (&[b1, o], &[b2, i]) if b1 == b2 => {
            let mut out = vec![0.0; o * i];
            gemm(
                o,
                b1,
                i,
                1.0,
                post.data(),
                true,
                pre.data(),
                false,
                0.0,
                &mut out,
            );
            Ok(Tensor::from_parts(vec![o, i], out))
        }
        _ => Err(Error::shape("outer_sum", post.shape(), pre.shape())),
    }
}

/// Piecewise-linear saturating activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    /// `max(0, min(x / 2, 1))`
    #[default]
    HardSigmoidHalf,
    /// `max(0, min(x, 1))`
    HardSigmoid,
}

impl Activation {
    /// Slope on the non-saturated interval.
    pub fn slope(self) -> f64 {
        match self {
            Activation::HardSigmoidHalf => 0.5,
            Activation::HardSigmoid => 1.0,
        }
    }

    /// Upper end of the non-saturated interval `(0, knee)`.
    fn knee(self) -> f64 {
        1.0 / self.slope()
    }

    pub fn eval(self, x: f64) -> f64 {
        (x * self.slope()).clamp(0.0, 1.0)
    }

    /// Derivative, taken as 0 at the kinks.
    pub fn deriv(self, x: f64) -> f64 {
        if x > 0.0 && x < self.knee() {
            self.slope()
        } else {
            0.0
        }
    }

    /// Derivative recovered from an output value `y = eval(x)`: the unit is on
    /// its linear piece exactly when `0 < y < 1`.
    pub fn deriv_from_output(self, y: f64) -> f64 {
        if y > 0.0 && y < 1.0 {
            self.slope()
        } else {
            0.0
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        x.map(|v| self.eval(v))
    }

    pub fn apply_deriv(self, x: &Tensor) -> Tensor {
        x.map(|v| self.deriv(v))
    }
}

/// Applies the default activation.
pub fn activation(x: &Tensor) -> Tensor {
    Activation::default().apply(x)
}

/// Derivative of the default activation (0 at the kinks).
pub fn activation_deriv(x: &Tensor) -> Tensor {
    Activation::default().apply_deriv(x)
}
