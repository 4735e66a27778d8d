//! Forward and backward passes.
//!
//! All arithmetic is f64 so that analytic gradients can be validated against
//! central finite differences at tight tolerances. Convolutions are 3x3 with
//! "same" zero padding, written as contiguous row operations so the compiler
//! can vectorize them; the same slicing drives forward, input-gradient, and
//! weight-gradient passes.

use crate::error::{Error, Result};
use crate::model::{Layer, Params};
use crate::raster::Raster;

/// Dense CHW tensor.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Tensor {
            ch,
            h,
            w,
            data: vec![0.0; ch * h * w],
        }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Byte patch (interleaved) to CHW tensor scaled into [0, 1].
pub fn tensor_from_patch(patch: &Raster) -> Result<Tensor> {
    let bytes = patch.bytes()?;
    let (w, h, c) = (patch.width(), patch.height(), patch.channels());
    let mut t = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let plane = t.plane_mut(ch);
        for px in 0..w * h {
            plane[px] = bytes[px * c + ch] as f64 / 255.0;
        }
    }
    Ok(t)
}

/// Loss clamp bounds for p in the cross-entropy terms.
pub const P_CLAMP_LO: f64 = 1e-7;
pub const P_CLAMP_HI: f64 = 1.0 - 1e-7;

enum Saved {
    Conv { input: Tensor },
    Relu { active: Vec<bool> },
    Pool { in_h: usize, in_w: usize, argmax: Vec<u32> },
    Upsample { in_h: usize, in_w: usize },
    Sigmoid,
}

/// conv3x3 "same": out[oc] = bias[oc] + sum_ic w[oc][ic] * in[ic].
/// dst += 3x3 zero-padded convolution of src with the 9 taps in `k`
/// (row-major kernel). All nine taps are applied in one pass per output
/// row so each plane is touched once instead of nine times; the per-pixel
/// summation order is fixed, which keeps outputs identical for identical
/// neighborhoods regardless of where a window was cropped.
fn conv3x3_accum(dst: &mut [f64], src: &[f64], k: &[f64; 9], h: usize, w: usize) {
    // One row fused against up to three source rows; rows outside the
    // image contribute nothing (zero padding).
    let row_pass = |dst_row: &mut [f64], src_row: &[f64], w0: f64, w1: f64, w2: f64| {
        let n = w.saturating_sub(2);
        if w >= 2 {
            dst_row[0] += w1 * src_row[0] + w2 * src_row[1];
            dst_row[w - 1] += w0 * src_row[w - 2] + w1 * src_row[w - 1];
        } else {
            dst_row[0] += w1 * src_row[0];
            return;
        }
        let d = &mut dst_row[1..1 + n];
        let a = &src_row[0..n];
        let b = &src_row[1..1 + n];
        let c = &src_row[2..2 + n];
        for i in 0..n {
            d[i] += w0 * a[i] + w1 * b[i] + w2 * c[i];
        }
    };
    for y in 0..h {
        let dst_row = &mut dst[y * w..(y + 1) * w];
        if y > 0 {
            row_pass(dst_row, &src[(y - 1) * w..y * w], k[0], k[1], k[2]);
        }
        row_pass(dst_row, &src[y * w..(y + 1) * w], k[3], k[4], k[5]);
        if y + 1 < h {
            row_pass(dst_row, &src[(y + 1) * w..(y + 2) * w], k[6], k[7], k[8]);
        }
    }
}

fn conv_forward(input: &Tensor, out_ch: usize, weights: &[f64], bias: &[f64]) -> Tensor {
    let (h, w) = (input.h, input.w);
    let in_ch = input.ch;
    let mut out = Tensor::zeros(out_ch, h, w);
    for oc in 0..out_ch {
        let plane = out.plane_mut(oc);
        plane.fill(bias[oc]);
        for ic in 0..in_ch {
            let base = (oc * in_ch + ic) * 9;
            let k: [f64; 9] = weights[base..base + 9].try_into().unwrap();
            conv3x3_accum(plane, input.plane(ic), &k, h, w);
        }
    }
    out
}

/// Gradient wrt conv input: a 3x3 convolution of d_out with each kernel
/// rotated 180 degrees (the transpose of zero-padded convolution).
fn conv_backward_input(
    d_out: &Tensor,
    in_ch: usize,
    weights: &[f64],
) -> Tensor {
    let (h, w) = (d_out.h, d_out.w);
    let out_ch = d_out.ch;
    let mut d_in = Tensor::zeros(in_ch, h, w);
    for ic in 0..in_ch {
        let dip = d_in.plane_mut(ic);
        for oc in 0..out_ch {
            let base = (oc * in_ch + ic) * 9;
            let kw = &weights[base..base + 9];
            let k: [f64; 9] = [kw[8], kw[7], kw[6], kw[5], kw[4], kw[3], kw[2], kw[1], kw[0]];
            conv3x3_accum(dip, d_out.plane(oc), &k, h, w);
        }
    }
    d_in
}

/// Accumulates weight and bias gradients for one conv layer: nine shifted
/// dot products per (output, input) channel pair, gathered in one pass.
fn conv_backward_params(
    input: &Tensor,
    d_out: &Tensor,
    d_weights: &mut [f64],
    d_bias: &mut [f64],
) {
    let (h, w) = (d_out.h, d_out.w);
    let in_ch = input.ch;
    for oc in 0..d_out.ch {
        let dop = d_out.plane(oc);
        d_bias[oc] += dop.iter().sum::<f64>();
        for ic in 0..in_ch {
            let inp = input.plane(ic);
            let mut acc = [0f64; 9];
            // acc[ky*3+kx] = sum over (y, x) of dop[y][x] * inp[y+ky-1][x+kx-1];
            // gathered per d_out row against up to three input rows.
            let mut row_pass = |dy: &[f64], iy: &[f64], row: usize| {
                let n = w.saturating_sub(2);
                let (mut a0, mut a1, mut a2) = (0f64, 0f64, 0f64);
                if w >= 2 {
                    a1 += dy[0] * iy[0] + dy[w - 1] * iy[w - 1];
                    a2 += dy[0] * iy[1];
                    a0 += dy[w - 1] * iy[w - 2];
                } else {
                    a1 += dy[0] * iy[0];
                }
                let d = &dy[1..1 + n];
                let (p, q, r) = (&iy[0..n], &iy[1..1 + n], &iy[2..2 + n]);
                for i in 0..n {
                    a0 += d[i] * p[i];
                    a1 += d[i] * q[i];
                    a2 += d[i] * r[i];
                }
                acc[row * 3] += a0;
                acc[row * 3 + 1] += a1;
                acc[row * 3 + 2] += a2;
            };
            for y in 0..h {
                let dy = &dop[y * w..(y + 1) * w];
                if y > 0 {
                    row_pass(dy, &inp[(y - 1) * w..y * w], 0);
                }
                row_pass(dy, &inp[y * w..(y + 1) * w], 1);
                if y + 1 < h {
                    row_pass(dy, &inp[(y + 1) * w..(y + 2) * w], 2);
                }
            }
            let base = (oc * in_ch + ic) * 9;
            for t in 0..9 {
                d_weights[base + t] += acc[t];
            }
        }
    }
}

fn maxpool_forward(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (h, w) = (input.h, input.w);
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = Tensor::zeros(input.ch, oh, ow);
    let mut argmax = vec![0u32; input.ch * oh * ow];
    for c in 0..input.ch {
        let inp = input.plane(c);
        let base = c * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0u32;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for x in 2 * ox..(2 * ox + 2).min(w) {
                        let v = inp[y * w + x];
                        // Strict > keeps the first maximum on ties.
                        if v > best {
                            best = v;
                            best_i = (y * w + x) as u32;
                        }
                    }
                }
                out.plane_mut(c)[oy * ow + ox] = best;
                argmax[base + oy * ow + ox] = best_i;
            }
        }
    }
    (out, argmax)
}

/// Nearest-neighbor upsample to the recorded pre-pool dimensions.
fn upsample_forward(input: &Tensor, th: usize, tw: usize) -> Tensor {
    let mut out = Tensor::zeros(input.ch, th, tw);
    for c in 0..input.ch {
        let inp = input.plane(c);
        let op = out.plane_mut(c);
        for y in 0..th {
            let sy = y / 2;
            for x in 0..tw {
                op[y * tw + x] = inp[sy * input.w + x / 2];
            }
        }
    }
    out
}

pub struct ForwardTrace {
    saved: Vec<Saved>,
    pub output: Tensor,
}

/// Runs the network; `trace` additionally records what backward needs.
pub fn forward(params: &Params, input: &Tensor, trace: bool) -> Result<ForwardTrace> {
    let cfg = &params.config;
    if input.ch != cfg.input_channels {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels, config wants {}",
            input.ch, cfg.input_channels
        )));
    }
    let mut saved = Vec::new();
    let mut cur = input.clone();
    let mut offset = 0usize;
    let mut dim_stack: Vec<(usize, usize)> = Vec::new();
    for layer in &cfg.layers {
        match *layer {
            Layer::Conv { in_ch, out_ch } => {
                let wn = out_ch * in_ch * 9;
                let weights = &params.values[offset..offset + wn];
                let bias = &params.values[offset + wn..offset + wn + out_ch];
                offset += wn + out_ch;
                let out = conv_forward(&cur, out_ch, weights, bias);
                if trace {
                    saved.push(Saved::Conv {
                        input: std::mem::replace(&mut cur, out),
                    });
                } else {
                    cur = out;
                }
            }
            Layer::Relu => {
                let active: Vec<bool> = if trace {
                    cur.data.iter().map(|&v| v > 0.0).collect()
                } else {
                    Vec::new()
                };
                for v in &mut cur.data {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                if trace {
                    saved.push(Saved::Relu { active });
                }
            }
            Layer::MaxPool2 => {
                dim_stack.push((cur.h, cur.w));
                let (out, argmax) = maxpool_forward(&cur);
                if trace {
                    saved.push(Saved::Pool {
                        in_h: cur.h,
                        in_w: cur.w,
                        argmax,
                    });
                }
                cur = out;
            }
            Layer::Upsample2 => {
                let (th, tw) = dim_stack.pop().expect("validated: balanced pools");
                let out = upsample_forward(&cur, th, tw);
                if trace {
                    saved.push(Saved::Upsample {
                        in_h: cur.h,
                        in_w: cur.w,
                    });
                }
                cur = out;
            }
            Layer::Sigmoid => {
                for v in &mut cur.data {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
                if trace {
                    saved.push(Saved::Sigmoid);
                }
            }
        }
    }
    Ok(ForwardTrace { saved, output: cur })
}

/// Backpropagates `d_out` through the trace, accumulating parameter
/// gradients into `grad` (same layout as the parameter vector).
fn backward(params: &Params, trace: &ForwardTrace, mut d_cur: Tensor, grad: &mut [f64]) {
    let cfg = &params.config;
    // Parameter offsets per conv layer, in forward order.
    let mut offsets = Vec::new();
    let mut off = 0usize;
    for layer in &cfg.layers {
        if let Layer::Conv { in_ch, out_ch } = *layer {
            offsets.push(off);
            off += out_ch * in_ch * 9 + out_ch;
        }
    }
    let mut conv_idx = offsets.len();
    // The sigmoid output is the trace output; keep it at hand for its grad.
    let mut sigmoid_out = Some(&trace.output);

    for (li, layer) in cfg.layers.iter().enumerate().rev() {
        match (layer, &trace.saved[li]) {
            (&Layer::Conv { in_ch, out_ch }, Saved::Conv { input }) => {
                conv_idx -= 1;
                let o = offsets[conv_idx];
                let wn = out_ch * in_ch * 9;
                {
                    let (dw, db) = grad[o..o + wn + out_ch].split_at_mut(wn);
                    conv_backward_params(input, &d_cur, dw, db);
                }
                let weights = &params.values[o..o + wn];
                d_cur = conv_backward_input(&d_cur, in_ch, weights);
            }
            (Layer::Relu, Saved::Relu { active }) => {
                for (v, &a) in d_cur.data.iter_mut().zip(active) {
                    if !a {
                        *v = 0.0;
                    }
                }
            }
            (Layer::MaxPool2, Saved::Pool { in_h, in_w, argmax }) => {
                let mut d_in = Tensor::zeros(d_cur.ch, *in_h, *in_w);
                let n = d_cur.h * d_cur.w;
                for c in 0..d_cur.ch {
                    let dop = d_cur.plane(c);
                    let dip = d_in.plane_mut(c);
                    for i in 0..n {
                        dip[argmax[c * n + i] as usize] += dop[i];
                    }
                }
                d_cur = d_in;
            }
            (Layer::Upsample2, Saved::Upsample { in_h, in_w }) => {
                let mut d_in = Tensor::zeros(d_cur.ch, *in_h, *in_w);
                for c in 0..d_cur.ch {
                    let dop = d_cur.plane(c);
                    let dip = d_in.plane_mut(c);
                    for y in 0..d_cur.h {
                        let sy = y / 2;
                        for x in 0..d_cur.w {
                            dip[sy * in_w + x / 2] += dop[y * d_cur.w + x];
                        }
                    }
                }
                d_cur = d_in;
            }
            (Layer::Sigmoid, Saved::Sigmoid) => {
                let p = sigmoid_out.take().expect("single sigmoid");
                for (v, &pv) in d_cur.data.iter_mut().zip(&p.data) {
                    *v *= pv * (1.0 - pv);
                }
            }
            _ => unreachable!("trace out of sync with layers"),
        }
    }
}

/// Mean binary cross entropy over a batch of (patch, mask) pairs plus the
/// gradient wrt every parameter. Probabilities are clamped into
/// [1e-7, 1 - 1e-7] inside the log terms; the gradient is the exact
/// derivative of that clamped expression.
pub fn loss_and_grad(params: &Params, batch: &[(&Raster, &Raster)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = &params.config;
    for (patch, mask) in batch {
        if patch.channels() != cfg.input_channels {
            return Err(Error::DimensionMismatch(format!(
                "patch has {} channels, config wants {}",
                patch.channels(),
                cfg.input_channels
            )));
        }
        if mask.channels() != 1
            || mask.width() != patch.width()
            || mask.height() != patch.height()
        {
            return Err(Error::DimensionMismatch("mask does not match patch".into()));
        }
        if mask.bytes()?.iter().any(|&v| v > 1) {
            return Err(Error::invalid("training mask contains values other than 0/1"));
        }
    }

    let n_pixels: usize = batch
        .iter()
        .map(|(p, _)| p.width() * p.height())
        .sum();
    let norm = 1.0 / n_pixels as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0f64;

    for (patch, mask) in batch {
        let input = tensor_from_patch(patch)?;
        let trace = forward(params, &input, true)?;
        let p = &trace.output;
        let mask_bytes = mask.bytes()?;
        let mut d_out = Tensor::zeros(1, p.h, p.w);
        for i in 0..p.data.len() {
            let y = mask_bytes[i] as f64;
            let pc = p.data[i].clamp(P_CLAMP_LO, P_CLAMP_HI);
            loss -= (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()) * norm;
            // Zero slope where the clamp is active.
            if p.data[i] > P_CLAMP_LO && p.data[i] < P_CLAMP_HI {
                d_out.data[i] = (-y / pc + (1.0 - y) / (1.0 - pc)) * norm;
            }
        }
        backward(params, &trace, d_out, &mut grad);
    }
    Ok((loss, grad))
}

/// Loss only (used by finite differencing).
pub fn loss_only(params: &Params, batch: &[(&Raster, &Raster)]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let n_pixels: usize = batch
        .iter()
        .map(|(p, _)| p.width() * p.height())
        .sum();
    let norm = 1.0 / n_pixels as f64;
    let mut loss = 0f64;
    for (patch, mask) in batch {
        let input = tensor_from_patch(patch)?;
        let trace = forward(params, &input, false)?;
        let mask_bytes = mask.bytes()?;
        for (i, &pv) in trace.output.data.iter().enumerate() {
            let y = mask_bytes[i] as f64;
            let pc = pv.clamp(P_CLAMP_LO, P_CLAMP_HI);
            loss -= (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()) * norm;
        }
    }
    Ok(loss)
}

/// Plain SGD with momentum: v' = m v - lr g; p' = p + v'.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(n_params: usize, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut Params, grad: &[f64]) {
        assert_eq!(grad.len(), params.values.len());
        assert_eq!(grad.len(), self.velocity.len());
        for i in 0..grad.len() {
            self.velocity[i] = self.momentum * self.velocity[i] - self.lr * grad[i];
            params.values[i] += self.velocity[i];
        }
    }
}

/// Worst relative disagreement between the analytic gradient and a central
/// finite difference of the loss, probed at the parameter indices in
/// `coords`. The denominator is floored at 1e-6 so that entries whose true
/// gradient sits at the f64 noise level do not dominate the ratio.
pub fn fd_gradient_max_rel_error(
    params: &Params,
    batch: &[(&Raster, &Raster)],
    coords: &[usize],
    step: f64,
) -> Result<f64> {
    let (_, grad) = loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    let mut worst = 0f64;
    for &i in coords {
        let orig = probe.values[i];
        probe.values[i] = orig + step;
        let lp = loss_only(&probe, batch)?;
        probe.values[i] = orig - step;
        let lm = loss_only(&probe, batch)?;
        probe.values[i] = orig;
        let fd = (lp - lm) / (2.0 * step);
        let denom = grad[i].abs().max(fd.abs()).max(1e-6);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    Ok(worst)
}
