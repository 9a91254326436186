//! Forward, reverse and forward-mode rules for every op in the catalog.
//!
//! All three evaluation strategies (plain, taped, dual) funnel through
//! [`forward`], [`backward`] and [`jvp`], so a rule is written once.

use super::tensor::Tensor;
use crate::error::{shape_err, Error, Result};

/// An op together with its non-tensor attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    /// Elementwise quotient.
    Div,
    Scale(f64),
    /// `[m, k] x [k, n]`.
    Matmul,
    /// Inputs `x [B, in]`, `w [out, in]`, `b [out]`.
    Linear,
    /// Inputs `x [B, Ci, H, W]`, `w [Co, Ci, k, k]` and, when `bias`, `b [Co]`.
    Conv2d {
        stride: usize,
        padding: usize,
        bias: bool,
    },
    UpsampleNearest2x,
    /// Inputs `x [B, C, H, W]`, `gamma [C]`, `beta [C]`.
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    Silu,
    Reshape(Vec<usize>),
    ConcatChannels,
    /// Inputs `x [B, C, H, W]`, `v [B, C]`; adds `v` to every pixel.
    AddChannelBias,
    /// Input `table [N, D]`; output rows selected by the ids.
    Embedding(Vec<usize>),
    /// Input `t [B]`; output `[B, dim]` with sin then cos halves.
    Sinusoidal(usize),
    Mean,
    Sum,
    /// Mean squared difference of two equally shaped inputs.
    Mse,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Scale(_) => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::UpsampleNearest2x => "upsample_nearest2x",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::Silu => "silu",
            OpKind::Reshape(_) => "reshape",
            OpKind::ConcatChannels => "concat_channels",
            OpKind::AddChannelBias => "add_channel_bias",
            OpKind::Embedding(_) => "embedding",
            OpKind::Sinusoidal(_) => "sinusoidal",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Mse => "mse",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::Matmul => 2,
            OpKind::ConcatChannels | OpKind::AddChannelBias | OpKind::Mse => 2,
            OpKind::Linear | OpKind::GroupNorm { .. } => 3,
            OpKind::Conv2d { bias, .. } => 2 + usize::from(*bias),
            _ => 1,
        }
    }
}

/// Intermediates kept from the forward pass for the reverse pass.
#[derive(Clone, Debug, Default)]
pub enum Saved {
    #[default]
    None,
    GroupNorm {
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
}

/// Frequencies used by the sinusoidal embedding: log-spaced from 1 down to
/// 1/10000 over `half` slots.
pub fn sinusoidal_frequencies(half: usize) -> Vec<f64> {
    if half == 1 {
        return vec![1.0];
    }
    let step = (10000f64).ln() / (half - 1) as f64;
    (0..half).map(|k| (-step * k as f64).exp()).collect()
}

// ---------------------------------------------------------------- gemm

/// `c = a * b (+ c)`, with `a` logically `[m, k]` and `b` logically `[k, n]`;
/// the `*_t` flags say the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths match the logical dimensions and strides above.
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

// ---------------------------------------------------------------- conv2d

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("x {xs:?}, w {ws:?} must be 4-d"));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return shape_err("conv2d", format!("x {xs:?} incompatible with w {ws:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d", "stride must be positive");
        }
        let k = ws[2];
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}"));
        }
        Ok(Self {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            k,
            stride,
            pad,
            ho: (xs[2] + 2 * pad - k) / stride + 1,
            wo: (xs[3] + 2 * pad - k) / stride + 1,
        })
    }

    fn direct(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let npix = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let npix = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = b {
        if b.shape() != [g.cout] {
            return shape_err("conv2d", format!("bias {:?} for {} outputs", b.shape(), g.cout));
        }
    }
    let npix = g.ho * g.wo;
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * npix;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut cols = if g.direct() {
        Vec::new()
    } else {
        vec![0.0; g.rows() * npix]
    };
    for bi in 0..g.batch {
        let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
        let ob = &mut out[bi * out_stride..(bi + 1) * out_stride];
        let src: &[f64] = if g.direct() {
            xb
        } else {
            g.im2col(xb, &mut cols);
            &cols
        };
        gemm(g.cout, g.rows(), npix, w.data(), false, src, false, ob, false);
        if let Some(b) = b {
            for (co, chunk) in ob.chunks_mut(npix).enumerate() {
                let bv = b.data()[co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.batch, g.cout, g.ho, g.wo], out))
}

/// Returns `(grad_x, grad_w, grad_b)`; `grad_b` is always computed.
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>, Tensor)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    let npix = g.ho * g.wo;
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * npix;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gb = vec![0.0; g.cout];
    let mut cols = vec![0.0; if g.direct() { 0 } else { g.rows() * npix }];
    let mut gcols = vec![0.0; g.rows() * npix];
    for bi in 0..g.batch {
        let gob = &gout.data()[bi * out_stride..(bi + 1) * out_stride];
        for (co, chunk) in gob.chunks(npix).enumerate() {
            gb[co] += chunk.iter().sum::<f64>();
        }
        if let Some(gw) = gw.as_mut() {
            let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
            let src: &[f64] = if g.direct() {
                xb
            } else {
                g.im2col(xb, &mut cols);
                &cols
            };
            // gw[Co, R] += gout_b[Co, P] * src[R, P]^T
            gemm(g.cout, npix, g.rows(), gob, false, src, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let gxb = &mut gx[bi * in_stride..(bi + 1) * in_stride];
            if g.direct() {
                gemm(g.rows(), g.cout, npix, w.data(), true, gob, false, gxb, true);
            } else {
                gemm(g.rows(), g.cout, npix, w.data(), true, gob, false, &mut gcols, false);
                g.col2im(&gcols, gxb);
            }
        }
    }
    Ok((
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        Tensor::from_parts(vec![g.cout], gb),
    ))
}

// ---------------------------------------------------------------- group norm

fn group_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<(Tensor, Saved)> {
    let s = x.shape();
    if s.len() != 4 {
        return shape_err("group_norm", format!("x {s:?} must be 4-d"));
    }
    let (b, c) = (s[0], s[1]);
    let hw = s[2] * s[3];
    if groups == 0 || c % groups != 0 {
        return shape_err("group_norm", format!("{c} channels not divisible into {groups} groups"));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err("group_norm", "affine parameters must have one entry per channel");
    }
    let cpg = c / groups;
    let gsize = cpg * hw;
    let mut out = vec![0.0; x.len()];
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    for (gi, chunk) in x.data().chunks(gsize).enumerate() {
        let mu = chunk.iter().sum::<f64>() / gsize as f64;
        let var = chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
        let r = 1.0 / (var + eps).sqrt();
        mean.push(mu);
        rstd.push(r);
        let g = gi % groups;
        for (j, &v) in chunk.iter().enumerate() {
            let ch = g * cpg + j / hw;
            out[gi * gsize + j] = (v - mu) * r * gamma.data()[ch] + beta.data()[ch];
        }
    }
    Ok((Tensor::from_parts(s.to_vec(), out), Saved::GroupNorm { mean, rstd }))
}

/// Applies the Jacobian of `x -> (x - mean) * rstd` (self-adjoint) to `d`,
/// group by group.
fn group_norm_project(x: &Tensor, d: &[f64], mean: &[f64], rstd: &[f64], gsize: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for (gi, (xs, ds)) in x.data().chunks(gsize).zip(d.chunks(gsize)).enumerate() {
        let (mu, r) = (mean[gi], rstd[gi]);
        let n = gsize as f64;
        let mean_d = ds.iter().sum::<f64>() / n;
        let mean_dx = ds.iter().zip(xs).map(|(dv, xv)| dv * (xv - mu) * r).sum::<f64>() / n;
        for (j, (dv, xv)) in ds.iter().zip(xs).enumerate() {
            let xhat = (xv - mu) * r;
            out[gi * gsize + j] = r * (dv - mean_d - xhat * mean_dx);
        }
    }
    out
}

// ---------------------------------------------------------------- helpers

fn expect_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return shape_err("matmul", format!("{sa:?} x {sb:?}"));
    }
    Ok((sa[0], sa[1], sb[1]))
}

fn matmul(a: &Tensor, a_t: bool, b: &Tensor, b_t: bool, m: usize, k: usize, n: usize) -> Tensor {
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), a_t, b.data(), b_t, &mut out, false);
    Tensor::from_parts(vec![m, n], out)
}

fn linear_dims(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (sx, sw) = (x.shape(), w.shape());
    if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] || b.shape() != [sw[0]] {
        return shape_err("linear", format!("x {sx:?}, w {sw:?}, b {:?}", b.shape()));
    }
    Ok((sx[0], sx[1], sw[0]))
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dims: (usize, usize, usize)) -> Tensor {
    let (batch, din, dout) = dims;
    let mut out = vec![0.0; batch * dout];
    gemm(batch, din, dout, x.data(), false, w.data(), true, &mut out, false);
    if let Some(b) = b {
        for row in out.chunks_mut(dout) {
            row.iter_mut().zip(b.data()).for_each(|(o, bv)| *o += bv);
        }
    }
    Tensor::from_parts(vec![batch, dout], out)
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn silu_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

fn upsample(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return shape_err("upsample_nearest2x", format!("x {s:?} must be 4-d"));
    }
    let (h, w) = (s[2], s[3]);
    let mut out = vec![0.0; x.len() * 4];
    for (plane, src) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![s[0], s[1], 2 * h, 2 * w], out))
}

fn upsample_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let mut out = vec![0.0; x.len()];
    for (plane, src) in g.data().chunks(4 * h * w).enumerate() {
        let dst = &mut out[plane * h * w..(plane + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return shape_err("concat_channels", format!("{sa:?} vs {sb:?}"));
    }
    let (na, nb) = (a.len() / sa[0], b.len() / sb[0]);
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bi in 0..sa[0] {
        out.extend_from_slice(&a.data()[bi * na..(bi + 1) * na]);
        out.extend_from_slice(&b.data()[bi * nb..(bi + 1) * nb]);
    }
    Ok(Tensor::from_parts(vec![sa[0], sa[1] + sb[1], sa[2], sa[3]], out))
}

fn split_channels(g: &Tensor, a: &Tensor, b: &Tensor) -> (Tensor, Tensor) {
    let batch = a.shape()[0];
    let (na, nb) = (a.len() / batch, b.len() / batch);
    let mut ga = Vec::with_capacity(a.len());
    let mut gb = Vec::with_capacity(b.len());
    for chunk in g.data().chunks(na + nb) {
        ga.extend_from_slice(&chunk[..na]);
        gb.extend_from_slice(&chunk[na..]);
    }
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

fn add_channel_bias(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (sx, sv) = (x.shape(), v.shape());
    if sx.len() != 4 || sv != [sx[0], sx[1]] {
        return shape_err("add_channel_bias", format!("x {sx:?}, v {sv:?}"));
    }
    let hw = sx[2] * sx[3];
    let mut out = x.data().to_vec();
    for (plane, chunk) in out.chunks_mut(hw).enumerate() {
        let bv = v.data()[plane];
        chunk.iter_mut().for_each(|o| *o += bv);
    }
    Ok(Tensor::from_parts(sx.to_vec(), out))
}

fn channel_sums(g: &Tensor, v_shape: &[usize]) -> Tensor {
    let planes: usize = v_shape.iter().product();
    let hw = g.len() / planes;
    let data = g.data().chunks(hw).map(|c| c.iter().sum()).collect();
    Tensor::from_parts(v_shape.to_vec(), data)
}

fn embedding(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.ndim() != 2 {
        return shape_err("embedding", format!("table {:?} must be 2-d", table.shape()));
    }
    table.gather_axis0(ids).map_err(|_| Error::Shape {
        op: "embedding",
        detail: format!("id out of range for table {:?}", table.shape()),
    })
}

fn sinusoidal(t: &Tensor, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "sinusoidal embedding dimension must be even and positive, got {dim}"
        )));
    }
    if t.ndim() != 1 {
        return shape_err("sinusoidal", format!("t {:?} must be 1-d", t.shape()));
    }
    let half = dim / 2;
    let freqs = sinusoidal_frequencies(half);
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t.data() {
        out.extend(freqs.iter().map(|w| (w * tv).sin()));
        out.extend(freqs.iter().map(|w| (w * tv).cos()));
    }
    Ok(Tensor::from_parts(vec![t.len(), dim], out))
}

/// `out[b, k] = d/dt embed(t_b)[k] * s[b]`
fn sinusoidal_derivative(t: &Tensor, dim: usize, s: &Tensor) -> Tensor {
    let half = dim / 2;
    let freqs = sinusoidal_frequencies(half);
    let mut out = Vec::with_capacity(t.len() * dim);
    for (&tv, &sv) in t.data().iter().zip(s.data()) {
        out.extend(freqs.iter().map(|w| w * (w * tv).cos() * sv));
        out.extend(freqs.iter().map(|w| -w * (w * tv).sin() * sv));
    }
    Tensor::from_parts(vec![t.len(), dim], out)
}

fn arity_check(kind: &OpKind, n: usize) -> Result<()> {
    if kind.arity() != n {
        return shape_err(kind.name(), format!("expects {} inputs, got {n}", kind.arity()));
    }
    Ok(())
}

// ---------------------------------------------------------------- rules

/// Evaluates `kind` on concrete inputs.
pub fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<(Tensor, Saved)> {
    arity_check(kind, inputs.len())?;
    let x = inputs[0];
    let mut saved = Saved::None;
    let out = match kind {
        OpKind::Add => x.add(inputs[1])?,
        OpKind::Sub => x.sub(inputs[1])?,
        OpKind::Mul => x.mul(inputs[1])?,
        OpKind::Div => x.zip_map(inputs[1], |a, b| a / b)?,
        OpKind::Scale(s) => x.scale(*s),
        OpKind::Matmul => {
            let (m, k, n) = matmul_dims(x, inputs[1])?;
            matmul(x, false, inputs[1], false, m, k, n)
        }
        OpKind::Linear => {
            let dims = linear_dims(x, inputs[1], inputs[2])?;
            linear_forward(x, inputs[1], Some(inputs[2]), dims)
        }
        OpKind::Conv2d { stride, padding, bias } => {
            conv2d_forward(x, inputs[1], bias.then(|| inputs[2]), *stride, *padding)?
        }
        OpKind::UpsampleNearest2x => upsample(x)?,
        OpKind::GroupNorm { groups, eps } => {
            let (y, s) = group_norm_forward(x, inputs[1], inputs[2], *groups, *eps)?;
            saved = s;
            y
        }
        OpKind::Silu => x.map(|v| v * sigmoid(v)),
        OpKind::Reshape(shape) => x.reshape(shape)?,
        OpKind::ConcatChannels => concat_channels(x, inputs[1])?,
        OpKind::AddChannelBias => add_channel_bias(x, inputs[1])?,
        OpKind::Embedding(ids) => embedding(x, ids)?,
        OpKind::Sinusoidal(dim) => sinusoidal(x, *dim)?,
        OpKind::Mean => Tensor::scalar(x.mean()),
        OpKind::Sum => Tensor::scalar(x.sum()),
        OpKind::Mse => {
            expect_same("mse", x, inputs[1])?;
            let n = x.len() as f64;
            let s: f64 = x
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(s / n)
        }
    };
    Ok((out.ensure_finite(kind.name())?, saved))
}

/// Vector-Jacobian products of `kind` for each input, given the output
/// gradient `g`. Entries are `None` where `needs` is false.
pub fn backward(
    kind: &OpKind,
    inputs: &[&Tensor],
    saved: &Saved,
    g: &Tensor,
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>> {
    let x = inputs[0];
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    let grads: Vec<Option<Tensor>> = match kind {
        OpKind::Add => vec![Some(g.clone()), Some(g.clone())],
        OpKind::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        OpKind::Mul => vec![
            want(0).then(|| g.mul(inputs[1])).transpose()?,
            want(1).then(|| g.mul(x)).transpose()?,
        ],
        OpKind::Div => vec![
            want(0).then(|| g.zip_map(inputs[1], |gv, b| gv / b)).transpose()?,
            want(1)
                .then(|| -> Result<Tensor> {
                    let q = x.zip_map(inputs[1], |a, b| -a / (b * b))?;
                    g.mul(&q)
                })
                .transpose()?,
        ],
        OpKind::Scale(s) => vec![Some(g.scale(*s))],
        OpKind::Matmul => {
            let (m, k, n) = matmul_dims(x, inputs[1])?;
            vec![
                want(0).then(|| matmul(g, false, inputs[1], true, m, n, k)),
                want(1).then(|| matmul(x, true, g, false, k, m, n)),
            ]
        }
        OpKind::Linear => {
            let (batch, din, dout) = linear_dims(x, inputs[1], inputs[2])?;
            let gx = want(0).then(|| matmul(g, false, inputs[1], false, batch, dout, din));
            let gw = want(1).then(|| matmul(g, true, x, false, dout, batch, din));
            let gb = want(2).then(|| {
                let mut acc = vec![0.0; dout];
                for row in g.data().chunks(dout) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                Tensor::from_parts(vec![dout], acc)
            });
            vec![gx, gw, gb]
        }
        OpKind::Conv2d { stride, padding, bias } => {
            let (gx, gw, gb) = conv2d_backward(x, inputs[1], g, *stride, *padding, want(0), want(1))?;
            let mut v = vec![gx, gw];
            if *bias {
                v.push(Some(gb));
            }
            v
        }
        OpKind::UpsampleNearest2x => vec![Some(upsample_backward(x, g))],
        OpKind::GroupNorm { groups, .. } => {
            let Saved::GroupNorm { mean, rstd } = saved else {
                return shape_err("group_norm", "missing saved statistics");
            };
            let s = x.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let cpg = c / groups;
            let gsize = cpg * hw;
            let gamma = inputs[1].data();
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            let mut gxhat = vec![0.0; x.len()];
            for (gi, (xs, gs)) in x.data().chunks(gsize).zip(g.data().chunks(gsize)).enumerate() {
                let (mu, r) = (mean[gi], rstd[gi]);
                let grp = gi % groups;
                for (j, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ch = grp * cpg + j / hw;
                    ggamma[ch] += gv * (xv - mu) * r;
                    gbeta[ch] += gv;
                    gxhat[gi * gsize + j] = gv * gamma[ch];
                }
            }
            let gx = group_norm_project(x, &gxhat, mean, rstd, gsize);
            vec![
                Some(Tensor::from_parts(s.to_vec(), gx)),
                Some(Tensor::from_parts(vec![c], ggamma)),
                Some(Tensor::from_parts(vec![c], gbeta)),
            ]
        }
        OpKind::Silu => vec![Some(g.zip_map(x, |gv, xv| gv * silu_grad(xv))?)],
        OpKind::Reshape(_) => vec![Some(g.reshape(x.shape())?)],
        OpKind::ConcatChannels => {
            let (ga, gb) = split_channels(g, x, inputs[1]);
            vec![Some(ga), Some(gb)]
        }
        OpKind::AddChannelBias => vec![Some(g.clone()), Some(channel_sums(g, inputs[1].shape()))],
        OpKind::Embedding(ids) => {
            let d = x.shape()[1];
            let mut acc = vec![0.0; x.len()];
            for (row, &id) in g.data().chunks(d).zip(ids) {
                acc[id * d..(id + 1) * d].iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            vec![Some(Tensor::from_parts(x.shape().to_vec(), acc))]
        }
        OpKind::Sinusoidal(dim) => {
            let ones = Tensor::ones(x.shape());
            let d = sinusoidal_derivative(x, *dim, &ones);
            let gt = d
                .data()
                .chunks(*dim)
                .zip(g.data().chunks(*dim))
                .map(|(dr, gr)| dr.iter().zip(gr).map(|(a, b)| a * b).sum())
                .collect();
            vec![Some(Tensor::from_parts(x.shape().to_vec(), gt))]
        }
        OpKind::Mean => {
            let gv = g.item()? / x.len() as f64;
            vec![Some(Tensor::full(x.shape(), gv))]
        }
        OpKind::Sum => vec![Some(Tensor::full(x.shape(), g.item()?))],
        OpKind::Mse => {
            let c = 2.0 * g.item()? / x.len() as f64;
            let ga = x.zip_map(inputs[1], |a, b| c * (a - b))?;
            let gb = ga.scale(-1.0);
            vec![Some(ga), Some(gb)]
        }
    };
    Ok(grads
        .into_iter()
        .enumerate()
        .map(|(i, g)| if want(i) { g } else { None })
        .collect())
}

fn tangent_sum(parts: impl IntoIterator<Item = Option<Tensor>>) -> Result<Option<Tensor>> {
    let mut acc: Option<Tensor> = None;
    for p in parts.into_iter().flatten() {
        acc = Some(match acc {
            None => p,
            Some(a) => a.add(&p)?,
        });
    }
    Ok(acc)
}

/// Jacobian-vector product of `kind` at `inputs` along `tangents`
/// (`None` = zero tangent). Returns `None` when the output tangent is zero.
pub fn jvp(kind: &OpKind, inputs: &[&Tensor], tangents: &[Option<&Tensor>], saved: &Saved) -> Result<Option<Tensor>> {
    arity_check(kind, tangents.len())?;
    for (p, t) in inputs.iter().zip(tangents) {
        if let Some(t) = t {
            expect_same(kind.name(), p, t)?;
        }
    }
    if tangents.iter().all(Option::is_none) {
        return Ok(None);
    }
    let x = inputs[0];
    let dx = tangents[0];
    let lin =
        |t: Option<&Tensor>| -> Result<Option<Tensor>> { t.map(|t| forward(kind, &[t]).map(|(o, _)| o)).transpose() };
    let out = match kind {
        OpKind::Add => tangent_sum([dx.cloned(), tangents[1].cloned()])?,
        OpKind::Sub => tangent_sum([dx.cloned(), tangents[1].map(|t| t.scale(-1.0))])?,
        OpKind::Mul => tangent_sum([
            dx.map(|t| t.mul(inputs[1])).transpose()?,
            tangents[1].map(|t| x.mul(t)).transpose()?,
        ])?,
        OpKind::Div => tangent_sum([
            dx.map(|t| t.zip_map(inputs[1], |tv, b| tv / b)).transpose()?,
            tangents[1]
                .map(|t| -> Result<Tensor> {
                    let q = x.zip_map(inputs[1], |a, b| -a / (b * b))?;
                    t.mul(&q)
                })
                .transpose()?,
        ])?,
        OpKind::Scale(_)
        | OpKind::Reshape(_)
        | OpKind::UpsampleNearest2x
        | OpKind::Embedding(_)
        | OpKind::Mean
        | OpKind::Sum => lin(dx)?,
        OpKind::Matmul => tangent_sum([
            dx.map(|t| forward(kind, &[t, inputs[1]]).map(|o| o.0)).transpose()?,
            tangents[1].map(|t| forward(kind, &[x, t]).map(|o| o.0)).transpose()?,
        ])?,
        OpKind::Linear => {
            let dims = linear_dims(x, inputs[1], inputs[2])?;
            let mut parts = vec![
                dx.map(|t| linear_forward(t, inputs[1], None, dims)),
                tangents[1].map(|t| linear_forward(x, t, None, dims)),
            ];
            if let Some(db) = tangents[2] {
                let zero = Tensor::zeros(&[dims.0, dims.1]);
                parts.push(Some(linear_forward(&zero, inputs[1], Some(db), dims)));
            }
            tangent_sum(parts)?
        }
        OpKind::Conv2d { stride, padding, .. } => {
            let mut parts = vec![
                dx.map(|t| conv2d_forward(t, inputs[1], None, *stride, *padding))
                    .transpose()?,
                tangents[1]
                    .map(|t| conv2d_forward(x, t, None, *stride, *padding))
                    .transpose()?,
            ];
            if let Some(Some(db)) = tangents.get(2) {
                let geo = ConvGeom::new(x, inputs[1], *stride, *padding)?;
                let npix = geo.ho * geo.wo;
                let mut data = Vec::with_capacity(geo.batch * geo.cout * npix);
                for _ in 0..geo.batch {
                    for &v in db.data() {
                        data.extend(std::iter::repeat_n(v, npix));
                    }
                }
                parts.push(Some(Tensor::from_parts(
                    vec![geo.batch, geo.cout, geo.ho, geo.wo],
                    data,
                )));
            }
            tangent_sum(parts)?
        }
        OpKind::GroupNorm { groups, .. } => {
            let Saved::GroupNorm { mean, rstd } = saved else {
                return shape_err("group_norm", "missing saved statistics");
            };
            let s = x.shape();
            let (c, hw) = (s[1], s[2] * s[3]);
            let gsize = c / groups * hw;
            let gamma = inputs[1];
            let mut out = vec![0.0; x.len()];
            if let Some(dx) = dx {
                let dxhat = group_norm_project(x, dx.data(), mean, rstd, gsize);
                for (i, v) in dxhat.iter().enumerate() {
                    out[i] += v * gamma.data()[(i / hw) % c];
                }
            }
            if let Some(dg) = tangents[1] {
                for (i, xv) in x.data().iter().enumerate() {
                    let gi = i / gsize;
                    out[i] += (xv - mean[gi]) * rstd[gi] * dg.data()[(i / hw) % c];
                }
            }
            if let Some(db) = tangents[2] {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += db.data()[(i / hw) % c];
                }
            }
            Some(Tensor::from_parts(s.to_vec(), out))
        }
        OpKind::Silu => dx.map(|t| t.zip_map(x, |tv, xv| tv * silu_grad(xv))).transpose()?,
        OpKind::ConcatChannels => {
            let da = dx.cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            let db = tangents[1].cloned().unwrap_or_else(|| Tensor::zeros(inputs[1].shape()));
            Some(concat_channels(&da, &db)?)
        }
        OpKind::AddChannelBias => {
            let base = dx.cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            match tangents[1] {
                Some(dv) => Some(add_channel_bias(&base, dv)?),
                None => Some(base),
            }
        }
        OpKind::Sinusoidal(dim) => dx.map(|t| sinusoidal_derivative(x, *dim, t)),
        OpKind::Mse => {
            let n = x.len() as f64;
            let diff = x.sub(inputs[1])?;
            let dd = tangent_sum([dx.cloned(), tangents[1].map(|t| t.scale(-1.0))])?;
            dd.map(|d| diff.dot(&d).map(|v| Tensor::scalar(2.0 * v / n)))
                .transpose()?
        }
    };
    out.map(|t| t.ensure_finite(kind.name())).transpose()
}
