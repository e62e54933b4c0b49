//! Differentiable operations recorded on a [`Tape`].
//!
//! Each builder validates shapes, computes the forward value, and appends a
//! node. Backward math lives in [`apply_backward`], keyed by the stored op.
//! All arithmetic is f32; softmax cross-entropy alone reduces in f64
//! internally for stability of the scalar loss.
//!
//! Tie conventions, fixed across the crate: maxpool and spatial max keep the
//! first maximum in row-major scan order; elementwise max keeps the first
//! operand.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, stride: usize, pad: usize },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    EltMax { a: Var, b: Var, b_wins: Vec<bool> },
    SpatialMax { input: Var, argmax: Vec<usize> },
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    Sum { input: Var },
    Sigmoid { input: Var },
    Tanh { input: Var },
    Relu { input: Var },
    Concat { a: Var, b: Var },
    Slice { input: Var, start: usize },
    Reshape { input: Var },
    SelectRow { table: Var, row: usize },
    SoftmaxXent { logits: Var, target: usize, probs: Vec<f32> },
}

fn any_needs(tape: &Tape, vars: &[Var]) -> bool {
    vars.iter().any(|v| tape.needs_grad(*v))
}

// ── convolution ──────────────────────────────────────────────────────────

/// 2-D convolution of `input` [C_in, H, W] with `weight` [C_out, C_in, k_h, k_w]
/// and `bias` [C_out], square stride and zero padding on both axes.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let x = tape.value(input);
    let w = tape.value(weight);
    let b = tape.value(bias);
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(Error::Shape(format!(
            "conv2d wants input rank 3, weight rank 4, bias rank 1; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArg("conv2d stride must be at least 1".into()));
    }
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, wci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if ci != wci {
        return Err(Error::Shape(format!(
            "conv2d channel mismatch: input {:?} has {} channels, weight {:?} expects {}",
            x.shape(),
            ci,
            w.shape(),
            wci
        )));
    }
    if b.shape()[0] != co {
        return Err(Error::Shape(format!(
            "conv2d bias {:?} does not match {} output channels",
            b.shape(),
            co
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Shape(format!(
            "conv2d kernel {}x{} exceeds padded input {}x{} (pad {})",
            kh,
            kw,
            h + 2 * pad,
            wd + 2 * pad,
            pad
        )));
    }
    let out = conv2d_forward(x, w, b, stride, pad);
    let needs = any_needs(tape, &[input, weight, bias]);
    Ok(tape.push(out, needs, Op::Conv2d { input, weight, bias, stride, pad }))
}

pub(crate) fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![co, ho, wo]);
    let (xd, wdat, bd) = (x.data(), w.data(), b.data());
    let od = out.data_mut();
    for c in 0..co {
        let wc = c * ci * kh * kw;
        for oy in 0..ho {
            for ox in 0..wo {
                // Bias first, then (channel, ky, kx) ascending. This is the
                // same accumulation order as the flattened fully-connected
                // form, which keeps the two paths bit-identical.
                let mut acc = bd[c];
                for ic in 0..ci {
                    let xc = ic * h * wd;
                    let wk = wc + ic * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xc + iy as usize * wd;
                        let wrow = wk + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wdat[wrow + kx] * xd[xrow + ix as usize];
                        }
                    }
                }
                od[(c * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    go: &[f32],
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut gx = if want_x { Some(vec![0.0f32; x.numel()]) } else { None };
    let mut gw = if want_w { Some(vec![0.0f32; w.numel()]) } else { None };
    let mut gb = if want_b { Some(vec![0.0f32; co]) } else { None };
    for c in 0..co {
        let wc = c * ci * kh * kw;
        for oy in 0..ho {
            for ox in 0..wo {
                let g = go[(c * ho + oy) * wo + ox];
                if let Some(gb) = gb.as_mut() {
                    gb[c] += g;
                }
                if gx.is_none() && gw.is_none() {
                    continue;
                }
                for ic in 0..ci {
                    let xc = ic * h * wd;
                    let wk = wc + ic * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xc + iy as usize * wd;
                        let wrow = wk + ky * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            if let Some(gw) = gw.as_mut() {
                                gw[wrow + kx] += g * xd[xrow + ix as usize];
                            }
                            if let Some(gx) = gx.as_mut() {
                                gx[xrow + ix as usize] += g * wdat[wrow + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ── max pooling ──────────────────────────────────────────────────────────

/// Channel-wise max pooling of `input` [C, H, W]. Returns the pooled map and
/// the argmax table: for each output cell, the flat index (y*W + x) of the
/// winning input cell in its channel plane, first maximum on ties.
pub fn maxpool2d(tape: &mut Tape, input: Var, kernel: usize, stride: usize) -> Result<(Var, Vec<usize>)> {
    let x = tape.value(input);
    if x.rank() != 3 {
        return Err(Error::Shape(format!("maxpool2d wants rank 3, got {:?}", x.shape())));
    }
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidArg("maxpool2d kernel and stride must be at least 1".into()));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    if kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "maxpool2d window {kernel}x{kernel} exceeds input {h}x{w}"
        )));
    }
    let (out, argmax) = maxpool_forward(x, kernel, stride);
    let needs = tape.needs_grad(input);
    let v = tape.push(out, needs, Op::MaxPool2d { input, argmax: argmax.clone() });
    Ok((v, argmax))
}

pub(crate) fn maxpool_forward(x: &Tensor, k: usize, stride: usize) -> (Tensor, Vec<usize>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let xd = x.data();
    let mut out = Tensor::zeros(vec![c, ho, wo]);
    let mut argmax = vec![0usize; c * ho * wo];
    let od = out.data_mut();
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for dy in 0..k {
                    let iy = oy * stride + dy;
                    for dx in 0..k {
                        let ix = ox * stride + dx;
                        let v = xd[base + iy * w + ix];
                        if v > best {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                let o = (ch * ho + oy) * wo + ox;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

// ── elementwise and reduction ops ────────────────────────────────────────

/// Elementwise maximum of two same-shape tensors. The returned mask records,
/// per element, whether `b` won strictly; ties go to `a`.
pub fn elementwise_max(tape: &mut Tape, a: Var, b: Var) -> Result<(Var, Vec<bool>)> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!(
            "elementwise_max shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let mut out = ta.clone();
    out.set_requires_grad(false);
    let mut b_wins = vec![false; ta.numel()];
    {
        let bd = tb.data();
        let od = out.data_mut();
        for i in 0..od.len() {
            if bd[i] > od[i] {
                od[i] = bd[i];
                b_wins[i] = true;
            }
        }
    }
    let needs = any_needs(tape, &[a, b]);
    let v = tape.push(out, needs, Op::EltMax { a, b, b_wins: b_wins.clone() });
    Ok((v, b_wins))
}

/// Per-channel global spatial maximum: [N, h, w] → [N]. The argmax table
/// holds the winning flat index (y*w + x) per channel, first max on ties.
pub fn spatial_max(tape: &mut Tape, input: Var) -> Result<(Var, Vec<usize>)> {
    let x = tape.value(input);
    if x.rank() != 3 {
        return Err(Error::Shape(format!("spatial_max wants rank 3, got {:?}", x.shape())));
    }
    let (n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let xd = x.data();
    let mut out = Tensor::zeros(vec![n]);
    let mut argmax = vec![0usize; n];
    {
        let od = out.data_mut();
        for c in 0..n {
            let plane = &xd[c * h * w..(c + 1) * h * w];
            let mut best = plane[0];
            let mut best_idx = 0usize;
            for (i, &v) in plane.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_idx = i;
                }
            }
            od[c] = best;
            argmax[c] = best_idx;
        }
    }
    let needs = tape.needs_grad(input);
    let v = tape.push(out, needs, Op::SpatialMax { input, argmax: argmax.clone() });
    Ok((v, argmax))
}

/// Matrix product. `a` is [m, k]; `b` is [k, n] (result [m, n]) or a vector
/// [k] (result [m]).
pub fn matmul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.rank() != 2 || (tb.rank() != 2 && tb.rank() != 1) {
        return Err(Error::Shape(format!(
            "matmul wants [m,k] by [k,n] or [k]; got {:?} by {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let (m, k) = (ta.shape()[0], ta.shape()[1]);
    if tb.shape()[0] != k {
        return Err(Error::Shape(format!(
            "matmul inner dimension mismatch: {:?} by {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let n = if tb.rank() == 2 { tb.shape()[1] } else { 1 };
    let (ad, bd) = (ta.data(), tb.data());
    let mut out = if tb.rank() == 2 {
        Tensor::zeros(vec![m, n])
    } else {
        Tensor::zeros(vec![m])
    };
    {
        let od = out.data_mut();
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for p in 0..k {
                    acc += ad[i * k + p] * bd[p * n + j];
                }
                od[i * n + j] = acc;
            }
        }
    }
    let needs = any_needs(tape, &[a, b]);
    Ok(tape.push(out, needs, Op::Matmul { a, b }))
}

/// Elementwise sum of two same-shape tensors.
pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!(
            "add shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let mut out = ta.clone();
    out.set_requires_grad(false);
    {
        let bd = tb.data();
        for (o, x) in out.data_mut().iter_mut().zip(bd) {
            *o += x;
        }
    }
    let needs = any_needs(tape, &[a, b]);
    Ok(tape.push(out, needs, Op::Add { a, b }))
}

/// Elementwise (Hadamard) product of two same-shape tensors.
pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.shape() != tb.shape() {
        return Err(Error::Shape(format!(
            "mul shape mismatch: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let mut out = ta.clone();
    out.set_requires_grad(false);
    {
        let bd = tb.data();
        for (o, x) in out.data_mut().iter_mut().zip(bd) {
            *o *= x;
        }
    }
    let needs = any_needs(tape, &[a, b]);
    Ok(tape.push(out, needs, Op::Mul { a, b }))
}

/// Multiplication by a compile-time constant factor.
pub fn scale(tape: &mut Tape, input: Var, factor: f32) -> Result<Var> {
    let mut out = tape.value(input).clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|x| *x *= factor);
    let needs = tape.needs_grad(input);
    Ok(tape.push(out, needs, Op::Scale { input, factor }))
}

/// Sum of all elements, producing a scalar of shape [1].
pub fn sum(tape: &mut Tape, input: Var) -> Result<Var> {
    let total: f32 = tape.value(input).data().iter().sum();
    let needs = tape.needs_grad(input);
    Ok(tape.push(Tensor::scalar(total), needs, Op::Sum { input }))
}

pub fn sigmoid(tape: &mut Tape, input: Var) -> Result<Var> {
    let mut out = tape.value(input).clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|x| *x = 1.0 / (1.0 + (-*x).exp()));
    let needs = tape.needs_grad(input);
    Ok(tape.push(out, needs, Op::Sigmoid { input }))
}

pub fn tanh(tape: &mut Tape, input: Var) -> Result<Var> {
    let mut out = tape.value(input).clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|x| *x = x.tanh());
    let needs = tape.needs_grad(input);
    Ok(tape.push(out, needs, Op::Tanh { input }))
}

pub fn relu(tape: &mut Tape, input: Var) -> Result<Var> {
    let mut out = tape.value(input).clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
    let needs = tape.needs_grad(input);
    Ok(tape.push(out, needs, Op::Relu { input }))
}

/// Concatenation of two vectors into one, `a` first.
pub fn concat(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (ta, tb) = (tape.value(a), tape.value(b));
    if ta.rank() != 1 || tb.rank() != 1 {
        return Err(Error::Shape(format!(
            "concat wants two vectors, got {:?} and {:?}",
            ta.shape(),
            tb.shape()
        )));
    }
    let mut data = ta.data().to_vec();
    data.extend_from_slice(tb.data());
    let needs = any_needs(tape, &[a, b]);
    Ok(tape.push(Tensor::vector(data), needs, Op::Concat { a, b }))
}

/// Contiguous sub-vector `input[start .. start+len]`. Differentiable in the
/// input; the bounds are plain integers.
pub fn slice(tape: &mut Tape, input: Var, start: usize, len: usize) -> Result<Var> {
    let x = tape.value(input);
    if x.rank() != 1 {
        return Err(Error::Shape(format!("slice wants a vector, got {:?}", x.shape())));
    }
    if len == 0 || start + len > x.numel() {
        return Err(Error::InvalidArg(format!(
            "slice [{start}, {}) out of bounds for length {}",
            start + len,
            x.numel()
        )));
    }
    let data = x.data()[start..start + len].to_vec();
    let needs = tape.needs_grad(input);
    Ok(tape.push(Tensor::vector(data), needs, Op::Slice { input, start }))
}

/// Same elements under a new shape; gradient passes through untouched.
pub fn reshape(tape: &mut Tape, input: Var, shape: Vec<usize>) -> Result<Var> {
    let out = tape.value(input).reshaped(shape)?;
    let needs = tape.needs_grad(input);
    Ok(tape.push(out, needs, Op::Reshape { input }))
}

/// Row `row` of a [R, C] table as a vector [C]; the gradient scatters back
/// into that row. This is the embedding lookup.
pub fn select_row(tape: &mut Tape, table: Var, row: usize) -> Result<Var> {
    let t = tape.value(table);
    if t.rank() != 2 {
        return Err(Error::Shape(format!("select_row wants rank 2, got {:?}", t.shape())));
    }
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    if row >= rows {
        return Err(Error::InvalidArg(format!(
            "select_row index {row} out of range for {rows} rows"
        )));
    }
    let data = t.data()[row * cols..(row + 1) * cols].to_vec();
    let needs = tape.needs_grad(table);
    Ok(tape.push(Tensor::vector(data), needs, Op::SelectRow { table, row }))
}

/// Scalar cross-entropy of a softmax over `logits` against a target index.
/// The max is subtracted before exponentiation and the reduction runs in
/// f64, so extreme logits stay finite.
pub fn softmax_cross_entropy(tape: &mut Tape, logits: Var, target: usize) -> Result<Var> {
    let l = tape.value(logits);
    if l.rank() != 1 {
        return Err(Error::Shape(format!(
            "softmax_cross_entropy wants a logit vector, got {:?}",
            l.shape()
        )));
    }
    let n = l.numel();
    if target >= n {
        return Err(Error::InvalidArg(format!(
            "softmax_cross_entropy target {target} out of range for {n} classes"
        )));
    }
    let ld = l.data();
    let m = ld.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut denom = 0.0f64;
    for &v in ld {
        denom += ((v - m) as f64).exp();
    }
    let log_denom = denom.ln();
    let loss = (log_denom - (ld[target] - m) as f64) as f32;
    let probs: Vec<f32> = ld
        .iter()
        .map(|&v| ((((v - m) as f64).exp()) / denom) as f32)
        .collect();
    let needs = tape.needs_grad(logits);
    Ok(tape.push(
        Tensor::scalar(loss),
        needs,
        Op::SoftmaxXent { logits, target, probs },
    ))
}

// ── backward dispatch ────────────────────────────────────────────────────

pub(crate) fn apply_backward(tape: &mut Tape, op: &Op, go: &[f32]) {
    match op {
        Op::Leaf => {}
        Op::Conv2d { input, weight, bias, stride, pad } => {
            let want = (
                tape.needs_grad(*input),
                tape.needs_grad(*weight),
                tape.needs_grad(*bias),
            );
            let (gx, gw, gb) = {
                let x = tape.value(*input);
                let w = tape.value(*weight);
                conv2d_backward(x, w, go, *stride, *pad, want.0, want.1, want.2)
            };
            if let Some(g) = gx {
                tape.accum(*input, &g);
            }
            if let Some(g) = gw {
                tape.accum(*weight, &g);
            }
            if let Some(g) = gb {
                tape.accum(*bias, &g);
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if !tape.needs_grad(*input) {
                return;
            }
            let x = tape.value(*input);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let per_channel = go.len() / c;
            let mut gx = vec![0.0f32; x.numel()];
            for (o, &idx) in argmax.iter().enumerate() {
                let ch = o / per_channel;
                gx[ch * h * w + idx] += go[o];
            }
            tape.accum(*input, &gx);
        }
        Op::EltMax { a, b, b_wins } => {
            if tape.needs_grad(*a) {
                let ga: Vec<f32> = go
                    .iter()
                    .zip(b_wins)
                    .map(|(&g, &bw)| if bw { 0.0 } else { g })
                    .collect();
                tape.accum(*a, &ga);
            }
            if tape.needs_grad(*b) {
                let gb: Vec<f32> = go
                    .iter()
                    .zip(b_wins)
                    .map(|(&g, &bw)| if bw { g } else { 0.0 })
                    .collect();
                tape.accum(*b, &gb);
            }
        }
        Op::SpatialMax { input, argmax } => {
            if !tape.needs_grad(*input) {
                return;
            }
            let x = tape.value(*input);
            let (h, w) = (x.shape()[1], x.shape()[2]);
            let mut gx = vec![0.0f32; x.numel()];
            for (c, &idx) in argmax.iter().enumerate() {
                gx[c * h * w + idx] += go[c];
            }
            tape.accum(*input, &gx);
        }
        Op::Matmul { a, b } => {
            let (m, k) = {
                let ta = tape.value(*a);
                (ta.shape()[0], ta.shape()[1])
            };
            let n = {
                let tb = tape.value(*b);
                if tb.rank() == 2 {
                    tb.shape()[1]
                } else {
                    1
                }
            };
            if tape.needs_grad(*a) {
                let bd = tape.value(*b).data();
                let mut ga = vec![0.0f32; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += go[i * n + j] * bd[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                tape.accum(*a, &ga);
            }
            if tape.needs_grad(*b) {
                let ad = tape.value(*a).data();
                let mut gb = vec![0.0f32; k * n];
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0f32;
                        for i in 0..m {
                            acc += ad[i * k + p] * go[i * n + j];
                        }
                        gb[p * n + j] = acc;
                    }
                }
                tape.accum(*b, &gb);
            }
        }
        Op::Add { a, b } => {
            if tape.needs_grad(*a) {
                tape.accum(*a, go);
            }
            if tape.needs_grad(*b) {
                tape.accum(*b, go);
            }
        }
        Op::Mul { a, b } => {
            if tape.needs_grad(*a) {
                let bd = tape.value(*b).data().to_vec();
                let ga: Vec<f32> = go.iter().zip(&bd).map(|(&g, &x)| g * x).collect();
                tape.accum(*a, &ga);
            }
            if tape.needs_grad(*b) {
                let ad = tape.value(*a).data().to_vec();
                let gb: Vec<f32> = go.iter().zip(&ad).map(|(&g, &x)| g * x).collect();
                tape.accum(*b, &gb);
            }
        }
        Op::Scale { input, factor } => {
            if tape.needs_grad(*input) {
                let g: Vec<f32> = go.iter().map(|&g| g * factor).collect();
                tape.accum(*input, &g);
            }
        }
        Op::Sum { input } => {
            if tape.needs_grad(*input) {
                let n = tape.value(*input).numel();
                tape.accum(*input, &vec![go[0]; n]);
            }
        }
        Op::Sigmoid { input } => {
            if tape.needs_grad(*input) {
                let g: Vec<f32> = {
                    let xd = tape.value(*input).data();
                    xd.iter()
                        .zip(go)
                        .map(|(&x, &g)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * s * (1.0 - s)
                        })
                        .collect()
                };
                tape.accum(*input, &g);
            }
        }
        Op::Tanh { input } => {
            if tape.needs_grad(*input) {
                let g: Vec<f32> = {
                    let xd = tape.value(*input).data();
                    xd.iter()
                        .zip(go)
                        .map(|(&x, &g)| {
                            let t = x.tanh();
                            g * (1.0 - t * t)
                        })
                        .collect()
                };
                tape.accum(*input, &g);
            }
        }
        Op::Relu { input } => {
            if tape.needs_grad(*input) {
                let g: Vec<f32> = {
                    let xd = tape.value(*input).data();
                    xd.iter().zip(go).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect()
                };
                tape.accum(*input, &g);
            }
        }
        Op::Concat { a, b } => {
            let na = tape.value(*a).numel();
            if tape.needs_grad(*a) {
                tape.accum(*a, &go[..na]);
            }
            if tape.needs_grad(*b) {
                tape.accum(*b, &go[na..]);
            }
        }
        Op::Slice { input, start } => {
            if tape.needs_grad(*input) {
                let n = tape.value(*input).numel();
                let mut g = vec![0.0f32; n];
                g[*start..*start + go.len()].copy_from_slice(go);
                tape.accum(*input, &g);
            }
        }
        Op::Reshape { input } => {
            if tape.needs_grad(*input) {
                tape.accum(*input, go);
            }
        }
        Op::SelectRow { table, row } => {
            if tape.needs_grad(*table) {
                let (rows, cols) = {
                    let t = tape.value(*table);
                    (t.shape()[0], t.shape()[1])
                };
                let mut g = vec![0.0f32; rows * cols];
                g[row * cols..(row + 1) * cols].copy_from_slice(go);
                tape.accum(*table, &g);
            }
        }
        Op::SoftmaxXent { logits, target, probs } => {
            if tape.needs_grad(*logits) {
                let mut g: Vec<f32> = probs.iter().map(|&p| p * go[0]).collect();
                g[*target] -= go[0];
                tape.accum(*logits, &g);
            }
        }
    }
}
