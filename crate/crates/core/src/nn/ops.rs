//! Forward and backward kernels. Every function here is pure.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
) -> Result<(usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::shape(format!(
            "conv input must be H x W x Cin, got {:?}",
            input.shape()
        )));
    }
    if kernel.rank() != 4 {
        return Err(Error::shape(format!(
            "conv kernel must be K x K x Cin x Cout, got {:?}",
            kernel.shape()
        )));
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let k = kernel.shape()[0];
    if kernel.shape()[1] != k {
        return Err(Error::shape("conv kernel must be square"));
    }
    if k.is_multiple_of(2) {
        return Err(Error::shape(format!(
            "conv kernel size must be odd, got {k}"
        )));
    }
    if kernel.shape()[2] != cin {
        return Err(Error::shape(format!(
            "kernel expects {} input channels, input has {}",
            kernel.shape()[2],
            cin
        )));
    }
    let cout = kernel.shape()[3];
    bias.expect_shape(&[cout])?;
    Ok((h, w, cin, cout, k))
}

fn check_mask(mask: Option<&[bool]>, cells: usize) -> Result<()> {
    match mask {
        Some(m) if m.len() != cells => Err(Error::shape(format!(
            "mask has {} cells, map has {}",
            m.len(),
            cells
        ))),
        _ => Ok(()),
    }
}

/// Same-size 2D cross-correlation with zero padding `(K - 1) / 2`.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    conv2d_masked(input, kernel, bias, None)
}

/// Same-size convolution over a partially valid grid.
///
/// Cells whose mask entry is false read as zero and their outputs stay zero,
/// which matches zeroing invalid cells before and after a dense convolution.
pub fn conv2d_masked(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (h, w, cin, cout, k) = conv_dims(input, kernel, bias)?;
    check_mask(mask, h * w)?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let wk = kernel.data();
    let b = bias.data();
    let valid = |cell: usize| mask.is_none_or(|m| m[cell]);

    let mut out = Tensor::zeros(&[h, w, cout]);
    let y = out.data_mut();
    for r in 0..h {
        for c in 0..w {
            let cell = r * w + c;
            if !valid(cell) {
                continue;
            }
            let acc = &mut y[cell * cout..(cell + 1) * cout];
            acc.copy_from_slice(b);
            for ky in 0..k {
                let rr = r as isize + ky as isize - pad;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let cc = c as isize + kx as isize - pad;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let src = rr as usize * w + cc as usize;
                    if !valid(src) {
                        continue;
                    }
                    let xs = &x[src * cin..(src + 1) * cin];
                    let wbase = (ky * k + kx) * cin * cout;
                    for (ci, &xv) in xs.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &wk[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_masked`] with respect to input, kernel and bias.
pub fn conv2d_masked_backward(
    input: &Tensor,
    kernel: &Tensor,
    mask: Option<&[bool]>,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let cout = kernel.shape().get(3).copied().unwrap_or(0);
    let (h, w, cin, cout, k) = conv_dims(input, kernel, &Tensor::zeros(&[cout]))?;
    grad_out.expect_shape(&[h, w, cout])?;
    check_mask(mask, h * w)?;
    let pad = (k / 2) as isize;
    let x = input.data();
    let wk = kernel.data();
    let g = grad_out.data();
    let valid = |cell: usize| mask.is_none_or(|m| m[cell]);

    let mut gin = Tensor::zeros(&[h, w, cin]);
    let mut gk = Tensor::zeros(kernel.shape());
    let mut gb = Tensor::zeros(&[cout]);
    {
        let gi = gin.data_mut();
        let gkd = gk.data_mut();
        let gbd = gb.data_mut();
        for r in 0..h {
            for c in 0..w {
                let cell = r * w + c;
                if !valid(cell) {
                    continue;
                }
                let go = &g[cell * cout..(cell + 1) * cout];
                for (acc, &gv) in gbd.iter_mut().zip(go) {
                    *acc += gv;
                }
                for ky in 0..k {
                    let rr = r as isize + ky as isize - pad;
                    if rr < 0 || rr >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let cc = c as isize + kx as isize - pad;
                        if cc < 0 || cc >= w as isize {
                            continue;
                        }
                        let src = rr as usize * w + cc as usize;
                        if !valid(src) {
                            continue;
                        }
                        let wbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = x[src * cin + ci];
                            let wrow = &wk[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let gkrow = &mut gkd[wbase + ci * cout..wbase + (ci + 1) * cout];
                            let mut dot = 0.0;
                            for co in 0..cout {
                                dot += wrow[co] * go[co];
                                gkrow[co] += xv * go[co];
                            }
                            gi[src * cin + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    Ok((gin, gk, gb))
}

fn linear_dims(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    if weight.rank() != 2 {
        return Err(Error::shape(format!(
            "linear weight must be F x G, got {:?}",
            weight.shape()
        )));
    }
    let (f, g) = (weight.shape()[0], weight.shape()[1]);
    if x.rank() == 0 || x.last_dim() != f {
        return Err(Error::shape(format!(
            "linear input {:?} does not end in {}",
            x.shape(),
            f
        )));
    }
    bias.expect_shape(&[g])?;
    Ok((x.numel() / f, f, g))
}

/// `y = x W + b` applied along the trailing dimension.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, f, g) = linear_dims(x, weight, bias)?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = g;
    let mut out = Tensor::zeros(&shape);
    let y = out.data_mut();
    let w = weight.data();
    for r in 0..rows {
        let acc = &mut y[r * g..(r + 1) * g];
        acc.copy_from_slice(bias.data());
        for (fi, &xv) in x.data()[r * f..(r + 1) * f].iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (a, &wv) in acc.iter_mut().zip(&w[fi * g..(fi + 1) * g]) {
                *a += xv * wv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`linear`] with respect to input, weight and bias.
pub fn linear_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = weight.shape().get(1).copied().unwrap_or(0);
    let (rows, f, g) = linear_dims(x, weight, &Tensor::zeros(&[g]))?;
    if grad_out.numel() != rows * g {
        return Err(Error::shape("linear gradient has the wrong size"));
    }
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[g]);
    let w = weight.data();
    let go = grad_out.data();
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for r in 0..rows {
            let grow = &go[r * g..(r + 1) * g];
            if grow.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (acc, &gv) in gbd.iter_mut().zip(grow) {
                *acc += gv;
            }
            for fi in 0..f {
                let xv = x.data()[r * f + fi];
                let wrow = &w[fi * g..(fi + 1) * g];
                let gwrow = &mut gwd[fi * g..(fi + 1) * g];
                let mut dot = 0.0;
                for gi in 0..g {
                    dot += wrow[gi] * grow[gi];
                    gwrow[gi] += xv * grow[gi];
                }
                gxd[r * f + fi] = dot;
            }
        }
    }
    Ok((gx, gw, gb))
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Softmax over the trailing dimension, computed with max subtraction.
pub fn softmax(x: &Tensor) -> Tensor {
    let c = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn masked_count(mask: &[bool], len: usize) -> Result<usize> {
    if mask.len() != len {
        return Err(Error::shape(format!(
            "mask has {} entries, expected {}",
            mask.len(),
            len
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Degenerate("loss mask selects no cells".into()));
    }
    Ok(count)
}

/// Mean binary cross entropy over mask-true cells.
pub fn bce_loss(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    target.expect_shape(pred.shape())?;
    let count = masked_count(mask, pred.numel())?;
    let mut total = 0.0;
    for ((&p, &y), &m) in pred.data().iter().zip(target.data()).zip(mask) {
        if m {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
    }
    Ok(total / count as f64)
}

/// Gradient of [`bce_loss`] with respect to `pred`; zero where the clamp is active.
pub fn bce_loss_backward(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<Tensor> {
    target.expect_shape(pred.shape())?;
    let count = masked_count(mask, pred.numel())? as f64;
    let mut grad = Tensor::zeros(pred.shape());
    for (k, g) in grad.data_mut().iter_mut().enumerate() {
        if !mask[k] {
            continue;
        }
        let p = pred.data()[k];
        if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
            continue;
        }
        let y = target.data()[k];
        *g = (p - y) / (p * (1.0 - p)) / count;
    }
    Ok(grad)
}

fn ce_dims(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    let c = logits.last_dim();
    if logits.rank() == 0 || c == 0 {
        return Err(Error::shape("logits need a class axis"));
    }
    let positions = logits.numel() / c;
    if labels.len() != positions {
        return Err(Error::shape(format!(
            "{} labels for {} positions",
            labels.len(),
            positions
        )));
    }
    let count = masked_count(mask, positions)?;
    for (pos, (&label, &m)) in labels.iter().zip(mask).enumerate() {
        if m && label >= c {
            return Err(Error::Index(format!(
                "label {label} at position {pos} is outside 0..{c}"
            )));
        }
    }
    Ok((c, count))
}

/// Mean of `-log softmax(logits)[label]` over mask-true positions.
pub fn ce_loss(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let (c, count) = ce_dims(logits, labels, mask)?;
    let mut total = 0.0;
    for (pos, row) in logits.data().chunks(c).enumerate() {
        if !mask[pos] {
            continue;
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[labels[pos]];
    }
    Ok(total / count as f64)
}

pub fn ce_loss_backward(logits: &Tensor, labels: &[usize], mask: &[bool]) -> Result<Tensor> {
    let (c, count) = ce_dims(logits, labels, mask)?;
    let mut grad = Tensor::zeros(logits.shape());
    for (pos, (row, grow)) in logits
        .data()
        .chunks(c)
        .zip(grad.data_mut().chunks_mut(c))
        .enumerate()
    {
        if !mask[pos] {
            continue;
        }
        grow.copy_from_slice(row);
        softmax_in_place(grow);
        grow[labels[pos]] -= 1.0;
        for v in grow.iter_mut() {
            *v /= count as f64;
        }
    }
    Ok(grad)
}
