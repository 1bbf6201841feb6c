//! Convolution, ReLU and nearest-neighbour upsampling over channel-major
//! `[C][H][W]` f32 buffers, with hand-written backward passes.
//!
//! Every output element accumulates over its reduction axis in a fixed
//! order that does not depend on how many output channels a layer has, so
//! growing a head never perturbs the logits of existing channels.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }
}

/// Weights `[out][in·k·k]` and per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub shape: ConvShape,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

/// Input columns kept from the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    pub cols: Vec<f32>,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2d {
    /// He-normal weights scaled by `scale`, zero bias.
    pub fn init<R: Rng>(shape: ConvShape, scale: f32, rng: &mut R) -> Self {
        let std = (2.0 / shape.patch_len() as f32).sqrt() * scale;
        let n = Normal::new(0.0f32, std).expect("finite std");
        let weight = (0..shape.out_channels * shape.patch_len())
            .map(|_| n.sample(rng))
            .collect();
        Self {
            shape,
            weight,
            bias: vec![0.0; shape.out_channels],
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Appends `extra` output channels with weights drawn from N(0, std²).
    pub fn grow_outputs<R: Rng>(&mut self, extra: usize, std: f32, rng: &mut R) {
        let n = Normal::new(0.0f32, std.max(0.0)).expect("finite std");
        for _ in 0..extra * self.shape.patch_len() {
            self.weight.push(if std > 0.0 { n.sample(rng) } else { 0.0 });
        }
        self.bias.extend(std::iter::repeat_n(0.0, extra));
        self.shape.out_channels += extra;
    }

    pub fn forward(&self, input: &[f32], h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        let (oh, ow) = self.shape.out_dims(h, w);
        let cols = im2col(input, self.shape, h, w, oh, ow);
        let np = oh * ow;
        let q = self.shape.patch_len();
        let mut out = vec![0.0f32; self.shape.out_channels * np];
        for (o, orow) in out.chunks_exact_mut(np).enumerate() {
            orow.fill(self.bias[o]);
            let wrow = &self.weight[o * q..(o + 1) * q];
            for (k, &wk) in wrow.iter().enumerate() {
                let crow = &cols[k * np..(k + 1) * np];
                for (a, &c) in orow.iter_mut().zip(crow) {
                    *a += wk * c;
                }
            }
        }
        (
            out,
            ConvCache {
                cols,
                in_h: h,
                in_w: w,
                out_h: oh,
                out_w: ow,
            },
        )
    }

    /// Accumulates parameter gradients into `grad`; returns the input
    /// gradient when `need_input` is set.
    pub fn backward(
        &self,
        cache: &ConvCache,
        grad_out: &[f32],
        grad: &mut ConvGrad,
        need_input: bool,
    ) -> Option<Vec<f32>> {
        let np = cache.out_h * cache.out_w;
        let q = self.shape.patch_len();
        for (o, grow) in grad_out.chunks_exact(np).enumerate() {
            grad.bias[o] += sum(grow);
            let gw = &mut grad.weight[o * q..(o + 1) * q];
            for (k, g) in gw.iter_mut().enumerate() {
                *g += dot(grow, &cache.cols[k * np..(k + 1) * np]);
            }
        }
        if !need_input {
            return None;
        }
        let mut gcols = vec![0.0f32; q * np];
        for (o, grow) in grad_out.chunks_exact(np).enumerate() {
            let wrow = &self.weight[o * q..(o + 1) * q];
            for (k, &wk) in wrow.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let gc = &mut gcols[k * np..(k + 1) * np];
                for (a, &g) in gc.iter_mut().zip(grow) {
                    *a += wk * g;
                }
            }
        }
        Some(col2im(
            &gcols,
            self.shape,
            cache.in_h,
            cache.in_w,
            cache.out_h,
            cache.out_w,
        ))
    }
}

fn im2col(input: &[f32], s: ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let k = s.kernel;
    let pad = s.pad() as isize;
    let np = oh * ow;
    if k == 1 && s.stride == 1 {
        return input.to_vec();
    }
    let mut cols = vec![0.0f32; s.patch_len() * np];
    for c in 0..s.in_channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], s: ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let k = s.kernel;
    let pad = s.pad() as isize;
    let np = oh * ow;
    if k == 1 && s.stride == 1 {
        return cols.to_vec();
    }
    let mut out = vec![0.0f32; s.in_channels * h * w];
    for c in 0..s.in_channels {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let iy = (oy * s.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s.stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

fn sum(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let ch = a.chunks_exact(8);
    let r = ch.remainder();
    for x in ch {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    acc.iter().sum::<f32>() + r.iter().sum::<f32>()
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-ReLU activation is not positive.
pub fn relu_backward_inplace(grad: &mut [f32], activation: &[f32]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn upsample2(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &input[ch * h * w + (y / 2) * w..ch * h * w + (y / 2 + 1) * w];
            let dst = &mut out[ch * oh * ow + y * ow..ch * oh * ow + (y + 1) * ow];
            for x in 0..ow {
                dst[x] = src[x / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2`]: sums each 2×2 block.
pub fn upsample2_backward(grad: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[ch * h * w + (y / 2) * w + x / 2] += grad[ch * oh * ow + y * ow + x];
            }
        }
    }
    out
}
