//! Forward and backward kernels for the fixed op set.
//!
//! Kernels are pure functions of their input values. Backward kernels take
//! the forward inputs and output instead of bespoke saved state, so a graph
//! only has to keep node values around.

use super::tensor::{Real, Tensor};
use super::NdError;

/// The differentiable operations a [`Graph`](super::Graph) can record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// `a + b`, identical shapes.
    Add,
    /// `k * a` for a constant `k`.
    Scale(f64),
    /// Concatenate `[B, C_i, H, W]` inputs along the channel axis.
    ConcatChannels,
    /// `[M, K] @ [K, N]`.
    MatMul,
    /// `(x [B,Ci,H,W], w [Co,Ci,k,k], b [Co])`, stride 1, zero padding
    /// `k / 2`, with `k` one of 1 or 3.
    Conv2d,
    Relu,
    Silu,
    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    Upsample2x,
    /// 2x2 mean pooling of `[B, C, H, W]`; `H` and `W` must be even.
    AvgPool2x,
    /// Softmax over the channel axis of `[B, C, H, W]`.
    SoftmaxChannels,
    /// `(logits, target)` of equal `[B, C, H, W]` shape; pixel-mean of
    /// `-sum_c target_c * log_softmax(logits)_c`. Scalar output.
    CrossEntropyWithLogits,
    /// Mean of squared differences. Scalar output.
    Mse,
    /// Sum of all elements. Scalar output.
    Sum,
    /// `x [B, C, H, W] + b [B, C]` with `b` broadcast over the spatial axes.
    AddChannelBias,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Scale(_) => "scale",
            Op::ConcatChannels => "concat-channels",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::Relu => "relu",
            Op::Silu => "silu",
            Op::Upsample2x => "nearest-upsample-2x",
            Op::AvgPool2x => "avgpool-2x",
            Op::SoftmaxChannels => "softmax-channels",
            Op::CrossEntropyWithLogits => "cross-entropy-with-logits",
            Op::Mse => "mse",
            Op::Sum => "sum",
            Op::AddChannelBias => "add-channel-bias",
        }
    }
}

fn arity(op: Op, n: usize, expected: usize) -> Result<(), NdError> {
    if n != expected {
        return Err(NdError::Arity {
            op: op.name(),
            expected,
            got: n,
        });
    }
    Ok(())
}

fn mismatch<T: Real>(op: Op, a: &Tensor<T>, b: &Tensor<T>) -> NdError {
    NdError::ShapeMismatch {
        op: op.name(),
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub(crate) fn forward<T: Real>(op: Op, xs: &[&Tensor<T>]) -> Result<Tensor<T>, NdError> {
    for x in xs {
        if !x.all_finite() {
            return Err(NdError::NonFinite {
                op: op.name(),
                stage: "input",
            });
        }
    }
    let out = match op {
        Op::Add => {
            arity(op, xs.len(), 2)?;
            if xs[0].shape() != xs[1].shape() {
                return Err(mismatch(op, xs[0], xs[1]));
            }
            xs[0].add(xs[1])?
        }
        Op::Scale(k) => {
            arity(op, xs.len(), 1)?;
            xs[0].scale(T::of(k))
        }
        Op::ConcatChannels => concat_channels(xs)?,
        Op::MatMul => {
            arity(op, xs.len(), 2)?;
            matmul(xs[0], xs[1])?
        }
        Op::Conv2d => {
            arity(op, xs.len(), 3)?;
            conv2d(xs[0], xs[1], xs[2])?
        }
        Op::Relu => {
            arity(op, xs.len(), 1)?;
            xs[0].map(|v| if v > T::zero() { v } else { T::zero() })
        }
        Op::Silu => {
            arity(op, xs.len(), 1)?;
            xs[0].map(|v| v * sigmoid(v))
        }
        Op::Upsample2x => {
            arity(op, xs.len(), 1)?;
            upsample2x(xs[0])?
        }
        Op::AvgPool2x => {
            arity(op, xs.len(), 1)?;
            avgpool2x(xs[0])?
        }
        Op::SoftmaxChannels => {
            arity(op, xs.len(), 1)?;
            softmax_channels(xs[0])?
        }
        Op::CrossEntropyWithLogits => {
            arity(op, xs.len(), 2)?;
            if xs[0].shape() != xs[1].shape() {
                return Err(mismatch(op, xs[0], xs[1]));
            }
            cross_entropy(xs[0], xs[1])?
        }
        Op::Mse => {
            arity(op, xs.len(), 2)?;
            if xs[0].shape() != xs[1].shape() {
                return Err(mismatch(op, xs[0], xs[1]));
            }
            let n = T::from_usize(xs[0].len()).unwrap();
            let s: T = xs[0]
                .data()
                .iter()
                .zip(xs[1].data())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            Tensor::scalar(s / n)
        }
        Op::Sum => {
            arity(op, xs.len(), 1)?;
            Tensor::scalar(xs[0].sum())
        }
        Op::AddChannelBias => {
            arity(op, xs.len(), 2)?;
            add_channel_bias(xs[0], xs[1])?
        }
    };
    if !out.all_finite() {
        return Err(NdError::NonFinite {
            op: op.name(),
            stage: "output",
        });
    }
    Ok(out)
}

/// Gradients with respect to each input, given the upstream gradient `g`
/// of the output. Entries are `None` where `wants[i]` is false.
pub(crate) fn backward<T: Real>(
    op: Op,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    wants: &[bool],
) -> Result<Vec<Option<Tensor<T>>>, NdError> {
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; xs.len()];
    match op {
        Op::Add => {
            for (i, slot) in grads.iter_mut().enumerate() {
                if wants[i] {
                    *slot = Some(g.clone());
                }
            }
        }
        Op::Scale(k) => {
            if wants[0] {
                grads[0] = Some(g.scale(T::of(k)));
            }
        }
        Op::ConcatChannels => {
            let (b, ctot, h, w) = out.dims4("concat-channels")?;
            let hw = h * w;
            let mut offset = 0;
            for (i, x) in xs.iter().enumerate() {
                let c = x.shape()[1];
                if wants[i] {
                    let mut gx = Tensor::zeros(x.shape());
                    let gd = gx.data_mut();
                    for bi in 0..b {
                        let src = &g.data()[(bi * ctot + offset) * hw..(bi * ctot + offset + c) * hw];
                        gd[bi * c * hw..(bi + 1) * c * hw].copy_from_slice(src);
                    }
                    grads[i] = Some(gx);
                }
                offset += c;
            }
        }
        Op::MatMul => {
            let (m, k) = (xs[0].shape()[0], xs[0].shape()[1]);
            let n = xs[1].shape()[1];
            if wants[0] {
                // dA[m,k] = G[m,n] @ B^T
                let mut ga = Tensor::zeros(&[m, k]);
                T::gemm(
                    m, n, k, T::one(),
                    g.data(), n as isize, 1,
                    xs[1].data(), 1, n as isize,
                    T::zero(), ga.data_mut(), k as isize, 1,
                );
                grads[0] = Some(ga);
            }
            if wants[1] {
                // dB[k,n] = A^T @ G
                let mut gb = Tensor::zeros(&[k, n]);
                T::gemm(
                    k, m, n, T::one(),
                    xs[0].data(), 1, k as isize,
                    g.data(), n as isize, 1,
                    T::zero(), gb.data_mut(), n as isize, 1,
                );
                grads[1] = Some(gb);
            }
        }
        Op::Conv2d => {
            let (gx, gw, gb) = conv2d_backward(xs[0], xs[1], g, wants)?;
            grads[0] = gx;
            grads[1] = gw;
            grads[2] = gb;
        }
        Op::Relu => {
            if wants[0] {
                grads[0] = Some(xs[0].zip_with(g, |x, gv| if x > T::zero() { gv } else { T::zero() })?);
            }
        }
        Op::Silu => {
            if wants[0] {
                grads[0] = Some(xs[0].zip_with(g, |x, gv| {
                    let s = sigmoid(x);
                    gv * s * (T::one() + x * (T::one() - s))
                })?);
            }
        }
        Op::Upsample2x => {
            if wants[0] {
                let (b, c, h, w) = xs[0].dims4("nearest-upsample-2x")?;
                let mut gx = Tensor::zeros(xs[0].shape());
                let gd = gx.data_mut();
                let w2 = 2 * w;
                for plane in 0..b * c {
                    let src = &g.data()[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dst = &mut gd[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for x in 0..w2 {
                            dst[(y / 2) * w + x / 2] += src[y * w2 + x];
                        }
                    }
                }
                grads[0] = Some(gx);
            }
        }
        Op::AvgPool2x => {
            if wants[0] {
                let (b, c, h, w) = xs[0].dims4("avgpool-2x")?;
                let (ho, wo) = (h / 2, w / 2);
                let quarter = T::of(0.25);
                let mut gx = Tensor::zeros(xs[0].shape());
                let gd = gx.data_mut();
                for plane in 0..b * c {
                    let src = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                    let dst = &mut gd[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        for x in 0..w {
                            dst[y * w + x] = src[(y / 2) * wo + x / 2] * quarter;
                        }
                    }
                }
                grads[0] = Some(gx);
            }
        }
        Op::SoftmaxChannels => {
            if wants[0] {
                let (b, c, h, w) = out.dims4("softmax-channels")?;
                let hw = h * w;
                let mut gx = Tensor::zeros(out.shape());
                let gd = gx.data_mut();
                let (y, gy) = (out.data(), g.data());
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            dot += y[i] * gy[i];
                        }
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            gd[i] = y[i] * (gy[i] - dot);
                        }
                    }
                }
                grads[0] = Some(gx);
            }
        }
        Op::CrossEntropyWithLogits => {
            let (b, c, h, w) = xs[0].dims4("cross-entropy-with-logits")?;
            let hw = h * w;
            let scale = g.item() / T::from_usize(b * hw).unwrap();
            let logp = log_softmax_channels(xs[0])?;
            let t = xs[1].data();
            if wants[0] {
                let mut gz = Tensor::zeros(xs[0].shape());
                let gd = gz.data_mut();
                for bi in 0..b {
                    let base = bi * c * hw;
                    for p in 0..hw {
                        let mut tsum = T::zero();
                        for ch in 0..c {
                            tsum += t[base + ch * hw + p];
                        }
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            gd[i] = scale * (tsum * logp.data()[i].exp() - t[i]);
                        }
                    }
                }
                grads[0] = Some(gz);
            }
            if wants[1] {
                grads[1] = Some(logp.scale(-scale));
            }
        }
        Op::Mse => {
            let n = T::from_usize(xs[0].len()).unwrap();
            let k = T::of(2.0) * g.item() / n;
            if wants[0] {
                grads[0] = Some(xs[0].zip_with(xs[1], |a, b| k * (a - b))?);
            }
            if wants[1] {
                grads[1] = Some(xs[0].zip_with(xs[1], |a, b| k * (b - a))?);
            }
        }
        Op::Sum => {
            if wants[0] {
                grads[0] = Some(Tensor::full(xs[0].shape(), g.item()));
            }
        }
        Op::AddChannelBias => {
            if wants[0] {
                grads[0] = Some(g.clone());
            }
            if wants[1] {
                let (b, c, h, w) = xs[0].dims4("add-channel-bias")?;
                let hw = h * w;
                let gb = Tensor::from_fn(&[b, c], |i| g.data()[i * hw..(i + 1) * hw].iter().copied().sum());
                grads[1] = Some(gb);
            }
        }
    }
    Ok(grads)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn concat_channels<T: Real>(xs: &[&Tensor<T>]) -> Result<Tensor<T>, NdError> {
    let first = xs.first().ok_or(NdError::Empty {
        op: "concat-channels",
    })?;
    let (b, _, h, w) = first.dims4("concat-channels")?;
    let mut ctot = 0;
    for x in xs {
        let (bx, cx, hx, wx) = x.dims4("concat-channels")?;
        if (bx, hx, wx) != (b, h, w) {
            return Err(mismatch(Op::ConcatChannels, first, x));
        }
        ctot += cx;
    }
    let hw = h * w;
    let mut data = Vec::with_capacity(b * ctot * hw);
    for bi in 0..b {
        for x in xs {
            let c = x.shape()[1];
            data.extend_from_slice(&x.data()[bi * c * hw..(bi + 1) * c * hw]);
        }
    }
    Tensor::new(&[b, ctot, h, w], data)
}

fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (m, k) = match *a.shape() {
        [m, k] => (m, k),
        _ => {
            return Err(NdError::Rank {
                op: "matmul",
                expected: 2,
                shape: a.shape().to_vec(),
            })
        }
    };
    let (k2, n) = match *b.shape() {
        [k2, n] => (k2, n),
        _ => {
            return Err(NdError::Rank {
                op: "matmul",
                expected: 2,
                shape: b.shape().to_vec(),
            })
        }
    };
    if k != k2 {
        return Err(mismatch(Op::MatMul, a, b));
    }
    let mut out = Tensor::zeros(&[m, n]);
    T::gemm(
        m, k, n, T::one(),
        a.data(), k as isize, 1,
        b.data(), n as isize, 1,
        T::zero(), out.data_mut(), n as isize, 1,
    );
    Ok(out)
}

fn conv_dims<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize, usize), NdError> {
    let (b, ci, h, wd) = x.dims4("conv2d")?;
    let (co, wci, kh, kw) = w.dims4("conv2d")?;
    if wci != ci || kh != kw || !(kh == 1 || kh == 3) {
        return Err(mismatch(Op::Conv2d, x, w));
    }
    Ok((b, ci, h, wd, co, kh))
}

/// Column matrix `[ci * k * k, h * w]` of one image `[ci, h, w]`.
fn im2col<T: Real>(img: &[T], ci: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let sx = x as isize + dx;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], ci: usize, h: usize, w: usize, k: usize, img: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..ci {
        let plane = &mut img[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * hw..((c * k + ky) * k + kx + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x, &v) in src.iter().enumerate() {
                        let sx = x as isize + dx;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, ci, h, wd, co, k) = conv_dims(x, w)?;
    if bias.shape() != [co] {
        return Err(mismatch(Op::Conv2d, w, bias));
    }
    let hw = h * wd;
    let kk = ci * k * k;
    let mut out = Tensor::zeros(&[b, co, h, wd]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for bi in 0..b {
        let img = &x.data()[bi * ci * hw..(bi + 1) * ci * hw];
        let dst = &mut out.data_mut()[bi * co * hw..(bi + 1) * co * hw];
        for (o, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[o]);
        }
        let src: &[T] = if k == 1 {
            img
        } else {
            im2col(img, ci, h, wd, k, &mut cols);
            &cols
        };
        T::gemm(
            co, kk, hw, T::one(),
            w.data(), kk as isize, 1,
            src, hw as isize, 1,
            T::one(), dst, hw as isize, 1,
        );
    }
    Ok(out)
}

type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    wants: &[bool],
) -> Result<ConvGrads<T>, NdError> {
    let (b, ci, h, wd, co, k) = conv_dims(x, w)?;
    let hw = h * wd;
    let kk = ci * k * k;
    let mut gx = wants[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = wants[1].then(|| Tensor::zeros(w.shape()));
    let mut gb = wants[2].then(|| Tensor::zeros(&[co]));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if gx.is_some() { vec![T::zero(); kk * hw] } else { Vec::new() };
    for bi in 0..b {
        let gout = &g.data()[bi * co * hw..(bi + 1) * co * hw];
        if let Some(gb) = gb.as_mut() {
            for (o, row) in gout.chunks(hw).enumerate() {
                gb.data_mut()[o] += row.iter().copied().sum();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let img = &x.data()[bi * ci * hw..(bi + 1) * ci * hw];
            let src: &[T] = if k == 1 {
                img
            } else {
                im2col(img, ci, h, wd, k, &mut cols);
                &cols
            };
            // dW[co, kk] += G[co, hw] @ cols^T
            T::gemm(
                co, hw, kk, T::one(),
                gout, hw as isize, 1,
                src, 1, hw as isize,
                T::one(), gw.data_mut(), kk as isize, 1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx.data_mut()[bi * ci * hw..(bi + 1) * ci * hw];
            if k == 1 {
                // dX[ci, hw] = W^T @ G
                T::gemm(
                    ci, co, hw, T::one(),
                    w.data(), 1, kk as isize,
                    gout, hw as isize, 1,
                    T::zero(), dst, hw as isize, 1,
                );
            } else {
                T::gemm(
                    kk, co, hw, T::one(),
                    w.data(), 1, kk as isize,
                    gout, hw as isize, 1,
                    T::zero(), &mut dcols, hw as isize, 1,
                );
                col2im(&dcols, ci, h, wd, k, dst);
            }
        }
    }
    Ok((gx, gw, gb))
}

fn upsample2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, c, h, w) = x.dims4("nearest-upsample-2x")?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[b, c, h2, w2]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * h2 * w2..(plane + 1) * h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

fn avgpool2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, c, h, w) = x.dims4("avgpool-2x")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NdError::BadShape {
            shape: x.shape().to_vec(),
            reason: "avgpool-2x needs even spatial extents",
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let od = out.data_mut();
    for plane in 0..b * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut od[plane * ho * wo..(plane + 1) * ho * wo];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                dst[y * wo + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

/// Channel-wise softmax of a `[B, C, H, W]` tensor, outside any graph.
pub fn softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let mut out = log_softmax_channels(x)?;
    for v in out.data_mut() {
        *v = v.exp();
    }
    Ok(out)
}

/// Channel-wise log-softmax of a `[B, C, H, W]` tensor.
pub fn log_softmax_channels<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, c, h, w) = x.dims4("softmax-channels")?;
    let hw = h * w;
    let mut out = Tensor::zeros(x.shape());
    let (src, dst) = (x.data(), out.data_mut());
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[base + ch * hw + p]);
            }
            let mut s = T::zero();
            for ch in 0..c {
                s += (src[base + ch * hw + p] - m).exp();
            }
            let lse = m + s.ln();
            for ch in 0..c {
                dst[base + ch * hw + p] = src[base + ch * hw + p] - lse;
            }
        }
    }
    Ok(out)
}

fn cross_entropy<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, _, h, w) = logits.dims4("cross-entropy-with-logits")?;
    let logp = log_softmax_channels(logits)?;
    let s: T = logp
        .data()
        .iter()
        .zip(target.data())
        .map(|(&lp, &t)| -t * lp)
        .sum();
    Ok(Tensor::scalar(s / T::from_usize(b * h * w).unwrap()))
}

fn add_channel_bias<T: Real>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NdError> {
    let (b, c, h, w) = x.dims4("add-channel-bias")?;
    if bias.shape() != [b, c] {
        return Err(mismatch(Op::AddChannelBias, x, bias));
    }
    let hw = h * w;
    let mut out = x.clone();
    for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
        let v = bias.data()[i];
        for p in plane {
            *p += v;
        }
    }
    Ok(out)
}
