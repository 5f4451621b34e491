//! Forward and backward passes through the six layer kinds.
//!
//! Batches are NHWC. All math is f64. Backward covers exactly the layer
//! kinds the specs can express; there is no general autodiff graph.

use crate::error::{CoreError, Result};
use crate::nn::spec::{LayerSpec, Padding};
use crate::nn::state::{LayerParams, Mode, ModelState};
use crate::tensor::Tensor;

/// Per-layer gradients for the trainable slots, in `trainable_tensors_mut`
/// order. Layers without parameters carry an empty vec.
pub type Gradients = Vec<Vec<Tensor>>;

/// What one layer remembers from the forward pass.
pub(crate) enum Cache {
    Conv {
        input: Tensor,
    },
    Bn {
        xhat: Tensor,
        inv_std: Vec<f64>,
        /// Batch statistics when normalizing from the batch (train mode);
        /// `None` when moving statistics were used.
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    Lrelu {
        input: Tensor,
    },
    Pool {
        in_shape: [usize; 4],
        /// Flat input index of the max for every output element.
        argmax: Vec<usize>,
    },
    Gap {
        in_shape: [usize; 4],
    },
    Dense {
        /// Input flattened to (N, F).
        input: Tensor,
    },
}

fn same_padding(extent: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(extent);
    (total / 2, out)
}

fn conv_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let [n, h, w, ci] = dims4(input)?;
    let ks = kernel.shape()[0];
    let co = kernel.shape()[3];
    let (pad_y, oh, pad_x, ow) = match padding {
        Padding::Same => {
            let (py, oh) = same_padding(h, ks, stride);
            let (px, ow) = same_padding(w, ks, stride);
            (py as isize, oh, px as isize, ow)
        }
        Padding::Valid => (0, (h - ks) / stride + 1, 0, (w - ks) / stride + 1),
    };
    let x = input.data();
    let k = kernel.data();
    let b = bias.data();
    let mut out = vec![0.0; n * oh * ow * co];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((ni * oh + oy) * ow + ox) * co;
                out[obase..obase + co].copy_from_slice(b);
                for ky in 0..ks {
                    let iy = (oy * stride) as isize - pad_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let ix = (ox * stride) as isize - pad_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((ni * h + iy as usize) * w + ix as usize) * ci;
                        let kbase = (ky * ks + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[ibase + c_in];
                            let krow = kbase + c_in * co;
                            for c_out in 0..co {
                                out[obase + c_out] += xv * k[krow + c_out];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, oh, ow, co], out)
}

fn conv_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let [n, h, w, ci] = dims4(input)?;
    let [_, oh, ow, co] = dims4(dout)?;
    let ks = kernel.shape()[0];
    let (pad_y, pad_x) = match padding {
        Padding::Same => (
            same_padding(h, ks, stride).0 as isize,
            same_padding(w, ks, stride).0 as isize,
        ),
        Padding::Valid => (0, 0),
    };
    let x = input.data();
    let k = kernel.data();
    let dy = dout.data();
    let mut dk = vec![0.0; kernel.numel()];
    let mut db = vec![0.0; co];
    let mut dx = vec![0.0; input.numel()];
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let obase = ((ni * oh + oy) * ow + ox) * co;
                for c_out in 0..co {
                    db[c_out] += dy[obase + c_out];
                }
                for ky in 0..ks {
                    let iy = (oy * stride) as isize - pad_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..ks {
                        let ix = (ox * stride) as isize - pad_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let ibase = ((ni * h + iy as usize) * w + ix as usize) * ci;
                        let kbase = (ky * ks + kx) * ci * co;
                        for c_in in 0..ci {
                            let xv = x[ibase + c_in];
                            let krow = kbase + c_in * co;
                            let mut acc = 0.0;
                            for c_out in 0..co {
                                let g = dy[obase + c_out];
                                dk[krow + c_out] += xv * g;
                                acc += k[krow + c_out] * g;
                            }
                            dx[ibase + c_in] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::from_vec(kernel.shape(), dk)?,
        Tensor::from_vec(&[co], db)?,
        Tensor::from_vec(input.shape(), dx)?,
    ))
}

fn dims4(t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        [n, h, w, c] => Ok([*n, *h, *w, *c]),
        s => Err(CoreError::shape(format!(
            "expected rank-4 NHWC tensor, got shape {:?}",
            s
        ))),
    }
}

/// (rows, channels) view for batchnorm: channels are the last axis.
fn bn_dims(t: &Tensor) -> (usize, usize) {
    let c = *t.shape().last().unwrap();
    (t.numel() / c, c)
}

fn flatten_batch(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[0];
    let f = t.numel() / n;
    t.reshaped(&[n, f])
}

pub(crate) struct ForwardPass {
    pub caches: Vec<Cache>,
    pub logits: Tensor,
}

/// Runs the full forward pass, caching what backward needs.
///
/// `mode` selects batch vs moving statistics for batchnorm. Moving
/// statistics are never written here; `train_step` applies the updates
/// from the returned caches.
pub(crate) fn forward_cached(state: &ModelState, batch: &Tensor, mode: Mode) -> Result<ForwardPass> {
    let (h, w, c) = state.spec.input_shape;
    match batch.shape() {
        [_, bh, bw, bc] if *bh == h && *bw == w && *bc == c => {}
        s => {
            return Err(CoreError::shape(format!(
                "batch shape {:?} does not match model input ({}, {}, {})",
                s, h, w, c
            )))
        }
    }
    let mut cur = batch.clone();
    let mut caches = Vec::with_capacity(state.spec.layers.len());
    for (i, (layer, params)) in state.spec.layers.iter().zip(&state.params).enumerate() {
        let layer_err = |e: CoreError| {
            CoreError::shape(format!("layer {} ({}): {}", i + 1, layer.kind_name(), e))
        };
        cur = match (layer, params) {
            (
                LayerSpec::Conv2d {
                    stride, padding, ..
                },
                LayerParams::Conv { kernel, bias },
            ) => {
                caches.push(Cache::Conv { input: cur.clone() });
                conv_forward(&cur, kernel, bias, *stride, *padding).map_err(layer_err)?
            }
            (
                LayerSpec::Batchnorm { epsilon, .. },
                LayerParams::Bn {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                },
            ) => {
                let (rows, c) = bn_dims(&cur);
                let x = cur.data();
                let (mean, var, batch_stats) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; c];
                        let mut var = vec![0.0; c];
                        for r in 0..rows {
                            for ch in 0..c {
                                mean[ch] += x[r * c + ch];
                            }
                        }
                        for m in &mut mean {
                            *m /= rows as f64;
                        }
                        for r in 0..rows {
                            for ch in 0..c {
                                let d = x[r * c + ch] - mean[ch];
                                var[ch] += d * d;
                            }
                        }
                        for v in &mut var {
                            *v /= rows as f64;
                        }
                        let stats = Some((mean.clone(), var.clone()));
                        (mean, var, stats)
                    }
                    Mode::Eval => (moving_mean.data().to_vec(), moving_var.data().to_vec(), None),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
                let g = gamma.data();
                let b = beta.data();
                let mut xhat = vec![0.0; cur.numel()];
                let mut y = vec![0.0; cur.numel()];
                for r in 0..rows {
                    for ch in 0..c {
                        let idx = r * c + ch;
                        let xh = (x[idx] - mean[ch]) * inv_std[ch];
                        xhat[idx] = xh;
                        y[idx] = g[ch] * xh + b[ch];
                    }
                }
                caches.push(Cache::Bn {
                    xhat: Tensor::from_vec(cur.shape(), xhat)?,
                    inv_std,
                    batch_stats,
                });
                Tensor::from_vec(cur.shape(), y)?
            }
            (LayerSpec::LeakyRelu { negative_slope }, LayerParams::None) => {
                caches.push(Cache::Lrelu { input: cur.clone() });
                let slope = *negative_slope;
                let y: Vec<f64> = cur
                    .data()
                    .iter()
                    .map(|&v| if v >= 0.0 { v } else { slope * v })
                    .collect();
                Tensor::from_vec(cur.shape(), y)?
            }
            (LayerSpec::Maxpool2d { window, stride }, LayerParams::None) => {
                let [n, h, w, c] = dims4(&cur).map_err(layer_err)?;
                if *window > h || *window > w {
                    return Err(layer_err(CoreError::shape(format!(
                        "pool window {} exceeds input {}x{}",
                        window, h, w
                    ))));
                }
                let oh = (h - window).div_ceil(*stride) + 1;
                let ow = (w - window).div_ceil(*stride) + 1;
                let x = cur.data();
                let mut out = vec![0.0; n * oh * ow * c];
                let mut argmax = vec![0usize; n * oh * ow * c];
                for ni in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let mut best = f64::NEG_INFINITY;
                                let mut best_idx = 0usize;
                                for ky in 0..*window {
                                    let iy = oy * stride + ky;
                                    if iy >= h {
                                        break;
                                    }
                                    for kx in 0..*window {
                                        let ix = ox * stride + kx;
                                        if ix >= w {
                                            break;
                                        }
                                        let idx = ((ni * h + iy) * w + ix) * c + ch;
                                        if x[idx] > best {
                                            best = x[idx];
                                            best_idx = idx;
                                        }
                                    }
                                }
                                let oidx = ((ni * oh + oy) * ow + ox) * c + ch;
                                out[oidx] = best;
                                argmax[oidx] = best_idx;
                            }
                        }
                    }
                }
                caches.push(Cache::Pool {
                    in_shape: [n, h, w, c],
                    argmax,
                });
                Tensor::from_vec(&[n, oh, ow, c], out)?
            }
            (LayerSpec::GlobalAvgPool, LayerParams::None) => {
                let [n, h, w, c] = dims4(&cur).map_err(layer_err)?;
                let x = cur.data();
                let mut out = vec![0.0; n * c];
                for ni in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let base = ((ni * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                out[ni * c + ch] += x[base + ch];
                            }
                        }
                    }
                }
                let denom = (h * w) as f64;
                out.iter_mut().for_each(|v| *v /= denom);
                caches.push(Cache::Gap {
                    in_shape: [n, h, w, c],
                });
                Tensor::from_vec(&[n, c], out)?
            }
            (LayerSpec::Dense { out_units }, LayerParams::Dense { weight, bias }) => {
                let flat = flatten_batch(&cur)?;
                let n = flat.shape()[0];
                let f = flat.shape()[1];
                if weight.shape()[0] != f {
                    return Err(layer_err(CoreError::shape(format!(
                        "dense expects {} inputs, got {}",
                        weight.shape()[0],
                        f
                    ))));
                }
                let x = flat.data();
                let wm = weight.data();
                let b = bias.data();
                let o = *out_units;
                let mut out = vec![0.0; n * o];
                for ni in 0..n {
                    out[ni * o..(ni + 1) * o].copy_from_slice(b);
                    for fi in 0..f {
                        let xv = x[ni * f + fi];
                        let wrow = fi * o;
                        for oi in 0..o {
                            out[ni * o + oi] += xv * wm[wrow + oi];
                        }
                    }
                }
                caches.push(Cache::Dense { input: flat });
                Tensor::from_vec(&[n, o], out)?
            }
            _ => {
                return Err(CoreError::shape(format!(
                    "layer {}: spec/params mismatch",
                    i + 1
                )))
            }
        };
    }
    if !cur.is_finite() {
        return Err(CoreError::numeric("non-finite values in forward output"));
    }
    Ok(ForwardPass {
        caches,
        logits: cur,
    })
}

/// Logits for a batch, honoring the state's mode. No side effects.
pub fn forward(state: &ModelState, batch: &Tensor) -> Result<Tensor> {
    Ok(forward_cached(state, batch, state.mode)?.logits)
}

/// Backpropagates `dlogits` through the cached pass, returning per-layer
/// gradients for the trainable slots.
pub(crate) fn backward(
    state: &ModelState,
    pass: &ForwardPass,
    dlogits: &Tensor,
) -> Result<Gradients> {
    let mut grads: Gradients = vec![Vec::new(); state.spec.layers.len()];
    let mut dcur = dlogits.clone();
    for (i, ((layer, params), cache)) in state
        .spec
        .layers
        .iter()
        .zip(&state.params)
        .zip(&pass.caches)
        .enumerate()
        .rev()
    {
        dcur = match (layer, params, cache) {
            (
                LayerSpec::Conv2d {
                    stride, padding, ..
                },
                LayerParams::Conv { kernel, .. },
                Cache::Conv { input },
            ) => {
                let (dk, db, dx) = conv_backward(input, kernel, *stride, *padding, &dcur)?;
                grads[i] = vec![dk, db];
                dx
            }
            (
                LayerSpec::Batchnorm { .. },
                LayerParams::Bn { gamma, .. },
                Cache::Bn {
                    xhat,
                    inv_std,
                    batch_stats,
                },
            ) => {
                let (rows, c) = bn_dims(xhat);
                let dy = dcur.data();
                let xh = xhat.data();
                let g = gamma.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for r in 0..rows {
                    for ch in 0..c {
                        let idx = r * c + ch;
                        dgamma[ch] += dy[idx] * xh[idx];
                        dbeta[ch] += dy[idx];
                    }
                }
                let mut dx = vec![0.0; xhat.numel()];
                if batch_stats.is_some() {
                    // Batch statistics depend on the input.
                    let m = rows as f64;
                    for r in 0..rows {
                        for ch in 0..c {
                            let idx = r * c + ch;
                            dx[idx] = g[ch] * inv_std[ch] / m
                                * (m * dy[idx] - dbeta[ch] - xh[idx] * dgamma[ch]);
                        }
                    }
                } else {
                    // Moving statistics are constants.
                    for r in 0..rows {
                        for ch in 0..c {
                            let idx = r * c + ch;
                            dx[idx] = g[ch] * inv_std[ch] * dy[idx];
                        }
                    }
                }
                grads[i] = vec![
                    Tensor::from_vec(&[c], dgamma)?,
                    Tensor::from_vec(&[c], dbeta)?,
                ];
                Tensor::from_vec(xhat.shape(), dx)?
            }
            (LayerSpec::LeakyRelu { negative_slope }, _, Cache::Lrelu { input }) => {
                let slope = *negative_slope;
                let dx: Vec<f64> = input
                    .data()
                    .iter()
                    .zip(dcur.data())
                    .map(|(&x, &d)| if x >= 0.0 { d } else { slope * d })
                    .collect();
                Tensor::from_vec(input.shape(), dx)?
            }
            (LayerSpec::Maxpool2d { .. }, _, Cache::Pool { in_shape, argmax }) => {
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dcur.data()[o];
                }
                Tensor::from_vec(in_shape, dx)?
            }
            (LayerSpec::GlobalAvgPool, _, Cache::Gap { in_shape }) => {
                let [n, h, w, c] = *in_shape;
                let denom = (h * w) as f64;
                let dy = dcur.data();
                let mut dx = vec![0.0; n * h * w * c];
                for ni in 0..n {
                    for iy in 0..h {
                        for ix in 0..w {
                            let base = ((ni * h + iy) * w + ix) * c;
                            for ch in 0..c {
                                dx[base + ch] = dy[ni * c + ch] / denom;
                            }
                        }
                    }
                }
                Tensor::from_vec(&[n, h, w, c], dx)?
            }
            (LayerSpec::Dense { out_units }, LayerParams::Dense { weight, .. }, Cache::Dense { input }) => {
                let n = input.shape()[0];
                let f = input.shape()[1];
                let o = *out_units;
                let x = input.data();
                let wm = weight.data();
                let dy = dcur.data();
                let mut dw = vec![0.0; f * o];
                let mut db = vec![0.0; o];
                let mut dx = vec![0.0; n * f];
                for ni in 0..n {
                    for oi in 0..o {
                        db[oi] += dy[ni * o + oi];
                    }
                    for fi in 0..f {
                        let xv = x[ni * f + fi];
                        let wrow = fi * o;
                        let mut acc = 0.0;
                        for oi in 0..o {
                            let g = dy[ni * o + oi];
                            dw[wrow + oi] += xv * g;
                            acc += wm[wrow + oi] * g;
                        }
                        dx[ni * f + fi] = acc;
                    }
                }
                grads[i] = vec![
                    Tensor::from_vec(&[f, o], dw)?,
                    Tensor::from_vec(&[o], db)?,
                ];
                Tensor::from_vec(&[n, f], dx)?
            }
            _ => return Err(CoreError::shape(format!("layer {}: cache mismatch", i + 1))),
        };
        for g in &grads[i] {
            if !g.is_finite() {
                return Err(CoreError::numeric(format!(
                    "non-finite gradient in layer {} ({})",
                    i + 1,
                    layer.kind_name()
                )));
            }
        }
    }
    Ok(grads)
}
