//! Forward and backward loops for the built-in primitives.
//!
//! All loops are direct (no im2col, no blocking) so the iteration count of each
//! kernel is exactly what the FLOPs ledger charges for it.

use super::{Primitive, Tensor};
use crate::error::{Error, Result};

fn expect_arity(op: &'static str, operands: &[&Tensor], allowed: &[usize]) -> Result<()> {
    if allowed.contains(&operands.len()) {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op,
            msg: format!("expected {allowed:?} operands, got {}", operands.len()),
        })
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() == rank {
        Ok(())
    } else {
        Err(Error::InvalidShape {
            op,
            msg: format!("expected rank {rank}, got shape {:?}", t.shape()),
        })
    }
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

/// Output shape of `prim` without computing any values.
pub(crate) fn output_shape(prim: &Primitive, operands: &[&Tensor]) -> Result<Vec<usize>> {
    let op = prim.name();
    match prim {
        Primitive::Add => {
            expect_arity(op, operands, &[2])?;
            let (a, b) = (operands[0].shape(), operands[1].shape());
            if a == b || (b.len() <= a.len() && !b.is_empty() && a.ends_with(b)) {
                Ok(a.to_vec())
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        }
        Primitive::Multiply => {
            expect_arity(op, operands, &[2])?;
            let (a, b) = (operands[0].shape(), operands[1].shape());
            if a == b {
                Ok(a.to_vec())
            } else {
                Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        }
        Primitive::Matmul => {
            expect_arity(op, operands, &[2])?;
            let (a, b) = (operands[0].shape(), operands[1].shape());
            if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
            Ok(vec![a[0], b[1]])
        }
        Primitive::Conv2d { stride } => {
            expect_arity(op, operands, &[2, 3])?;
            let (x, w) = (operands[0], operands[1]);
            expect_rank(op, x, 4)?;
            expect_rank(op, w, 4)?;
            if *stride == 0 {
                return Err(Error::InvalidAttr {
                    op,
                    msg: "stride must be >= 1".into(),
                });
            }
            let (xs, ws) = (x.shape(), w.shape());
            if xs[1] != ws[1] {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: xs.to_vec(),
                    rhs: ws.to_vec(),
                });
            }
            let (ho, wo) = match (
                conv_out_dim(xs[2], ws[2], *stride),
                conv_out_dim(xs[3], ws[3], *stride),
            ) {
                (Some(h), Some(w)) => (h, w),
                _ => {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: xs.to_vec(),
                        rhs: ws.to_vec(),
                    })
                }
            };
            if let Some(bias) = operands.get(2) {
                if bias.shape() != [ws[0]] {
                    return Err(Error::ShapeMismatch {
                        op,
                        lhs: ws.to_vec(),
                        rhs: bias.shape().to_vec(),
                    });
                }
            }
            Ok(vec![xs[0], ws[0], ho, wo])
        }
        Primitive::Relu => {
            expect_arity(op, operands, &[1])?;
            Ok(operands[0].shape().to_vec())
        }
        Primitive::MaxPool2d { kernel, stride } => {
            expect_arity(op, operands, &[1])?;
            let x = operands[0];
            expect_rank(op, x, 4)?;
            if *kernel == 0 || *stride == 0 {
                return Err(Error::InvalidAttr {
                    op,
                    msg: "kernel and stride must be >= 1".into(),
                });
            }
            let s = x.shape();
            match (
                conv_out_dim(s[2], *kernel, *stride),
                conv_out_dim(s[3], *kernel, *stride),
            ) {
                (Some(h), Some(w)) => Ok(vec![s[0], s[1], h, w]),
                _ => Err(Error::InvalidShape {
                    op,
                    msg: format!("kernel {kernel} larger than input {s:?}"),
                }),
            }
        }
        Primitive::Flatten => {
            expect_arity(op, operands, &[1])?;
            let s = operands[0].shape();
            if s.len() < 2 {
                return Err(Error::InvalidShape {
                    op,
                    msg: format!("needs rank >= 2, got {s:?}"),
                });
            }
            Ok(vec![s[0], s[1..].iter().product()])
        }
        Primitive::Reshape { shape } => {
            expect_arity(op, operands, &[1])?;
            let s = operands[0].shape();
            if shape.contains(&0) || shape.iter().product::<usize>() != operands[0].len()
            {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: s.to_vec(),
                    rhs: shape.clone(),
                });
            }
            Ok(shape.clone())
        }
        Primitive::Mean | Primitive::Sum => {
            expect_arity(op, operands, &[1])?;
            Ok(vec![1])
        }
    }
}

pub(crate) fn forward(prim: &Primitive, operands: &[&Tensor]) -> Result<Tensor> {
    let shape = output_shape(prim, operands)?;
    let values = match prim {
        Primitive::Add => {
            let (a, b) = (operands[0].values(), operands[1].values());
            let n = b.len();
            a.iter().enumerate().map(|(i, &x)| x + b[i % n]).collect()
        }
        Primitive::Multiply => {
            let (a, b) = (operands[0].values(), operands[1].values());
            a.iter().zip(b).map(|(x, y)| x * y).collect()
        }
        Primitive::Matmul => {
            let (a, b) = (operands[0], operands[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            matmul(a.values(), b.values(), m, k, n)
        }
        Primitive::Conv2d { stride } => conv2d_forward(operands, *stride, &shape),
        Primitive::Relu => operands[0].values().iter().map(|&x| x.max(0.0)).collect(),
        Primitive::MaxPool2d { kernel, stride } => {
            let (values, _) = maxpool_forward(operands[0], *kernel, *stride, &shape);
            values
        }
        Primitive::Flatten | Primitive::Reshape { .. } => operands[0].values().to_vec(),
        Primitive::Sum => vec![operands[0].values().iter().sum()],
        Primitive::Mean => {
            let v = operands[0].values();
            vec![v.iter().sum::<f64>() / v.len() as f64]
        }
    };
    Tensor::new(shape, values)
}

/// Gradients of every operand flagged in `needs`, given the output gradient.
pub(crate) fn backward(
    prim: &Primitive,
    operands: &[Tensor],
    out_shape: &[usize],
    grad: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let mut result: Vec<Option<Vec<f64>>> = vec![None; operands.len()];
    match prim {
        Primitive::Add => {
            if needs[0] {
                result[0] = Some(grad.to_vec());
            }
            if needs[1] {
                let n = operands[1].len();
                let mut gb = vec![0.0; n];
                for (i, g) in grad.iter().enumerate() {
                    gb[i % n] += g;
                }
                result[1] = Some(gb);
            }
        }
        Primitive::Multiply => {
            let (a, b) = (operands[0].values(), operands[1].values());
            if needs[0] {
                result[0] = Some(grad.iter().zip(b).map(|(g, y)| g * y).collect());
            }
            if needs[1] {
                result[1] = Some(grad.iter().zip(a).map(|(g, x)| g * x).collect());
            }
        }
        Primitive::Matmul => {
            let (a, b) = (&operands[0], &operands[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                // dA[i, p] = sum_j g[i, j] * B[p, j]
                let bv = b.values();
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grad[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] = acc;
                    }
                }
                result[0] = Some(ga);
            }
            if needs[1] {
                // dB[p, j] = sum_i A[i, p] * g[i, j]
                let av = a.values();
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let x = av[i * k + p];
                        for j in 0..n {
                            gb[p * n + j] += x * grad[i * n + j];
                        }
                    }
                }
                result[1] = Some(gb);
            }
        }
        Primitive::Conv2d { stride } => {
            conv2d_backward(operands, *stride, out_shape, grad, needs, &mut result);
        }
        Primitive::Relu => {
            if needs[0] {
                let x = operands[0].values();
                result[0] = Some(
                    grad.iter()
                        .zip(x)
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect(),
                );
            }
        }
        Primitive::MaxPool2d { kernel, stride } => {
            if needs[0] {
                let (_, argmax) = maxpool_forward(&operands[0], *kernel, *stride, out_shape);
                let mut gx = vec![0.0; operands[0].len()];
                for (g, &src) in grad.iter().zip(&argmax) {
                    gx[src] += g;
                }
                result[0] = Some(gx);
            }
        }
        Primitive::Flatten | Primitive::Reshape { .. } => {
            if needs[0] {
                result[0] = Some(grad.to_vec());
            }
        }
        Primitive::Sum => {
            if needs[0] {
                result[0] = Some(vec![grad[0]; operands[0].len()]);
            }
        }
        Primitive::Mean => {
            if needs[0] {
                let n = operands[0].len();
                result[0] = Some(vec![grad[0] / n as f64; n]);
            }
        }
    }
    result
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

fn conv2d_forward(operands: &[&Tensor], stride: usize, out_shape: &[usize]) -> Vec<f64> {
    let (x, w) = (operands[0], operands[1]);
    let bias = operands.get(2).map(|b| b.values());
    let [_, c_in, h, wd] = dims4(x.shape());
    let [_, _, kh, kw] = dims4(w.shape());
    let [batch, c_out, ho, wo] = dims4(out_shape);
    let (xv, wv) = (x.values(), w.values());
    let mut out = vec![0.0; batch * c_out * ho * wo];
    for n in 0..batch {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let row = ((n * c_in + c) * h + oy * stride + ky) * wd + ox * stride;
                            let wrow = ((o * c_in + c) * kh + ky) * kw;
                            for kx in 0..kw {
                                acc += xv[row + kx] * wv[wrow + kx];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b[o];
                    }
                    out[((n * c_out + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    operands: &[Tensor],
    stride: usize,
    out_shape: &[usize],
    grad: &[f64],
    needs: &[bool],
    result: &mut [Option<Vec<f64>>],
) {
    let (x, w) = (&operands[0], &operands[1]);
    let [_, c_in, h, wd] = dims4(x.shape());
    let [_, _, kh, kw] = dims4(w.shape());
    let [batch, c_out, ho, wo] = dims4(out_shape);
    let (xv, wv) = (x.values(), w.values());
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let mut gb = (operands.len() == 3 && needs[2]).then(|| vec![0.0; c_out]);
    for n in 0..batch {
        for o in 0..c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad[((n * c_out + o) * ho + oy) * wo + ox];
                    if let Some(gb) = gb.as_mut() {
                        gb[o] += g;
                    }
                    for c in 0..c_in {
                        for ky in 0..kh {
                            let row = ((n * c_in + c) * h + oy * stride + ky) * wd + ox * stride;
                            let wrow = ((o * c_in + c) * kh + ky) * kw;
                            for kx in 0..kw {
                                if let Some(gw) = gw.as_mut() {
                                    gw[wrow + kx] += g * xv[row + kx];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    gx[row + kx] += g * wv[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    result[0] = gx;
    result[1] = gw;
    if operands.len() == 3 {
        result[2] = gb;
    }
}

/// Max pooling; returns values and, per output element, the flat index of the
/// first maximal input element in row-major window order.
fn maxpool_forward(
    x: &Tensor,
    kernel: usize,
    stride: usize,
    out_shape: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let [_, _, h, w] = dims4(x.shape());
    let [batch, ch, ho, wo] = dims4(out_shape);
    let xv = x.values();
    let total = batch * ch * ho * wo;
    let mut values = Vec::with_capacity(total);
    let mut argmax = Vec::with_capacity(total);
    for plane in 0..batch * ch {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                }
                values.push(xv[best]);
                argmax.push(best);
            }
        }
    }
    (values, argmax)
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}
