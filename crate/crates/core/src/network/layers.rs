//! Layer primitives with explicit backward passes. Activations are NCHW
//! `Array4`s in standard layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};
use rand::Rng as _;

use super::{Param, Scalar};
use crate::seed::Rng;

fn uniform<T: Scalar>(rng: &mut Rng, limit: f64, n: usize) -> Vec<T> {
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)).unwrap())
        .collect()
}

fn dims(x: &Array4<impl Clone>) -> (usize, usize, usize, usize) {
    x.dim()
}

/// `x` must be in standard layout; every activation produced here is.
fn as_slice<T>(x: &Array4<T>) -> &[T] {
    x.as_slice().expect("activations are contiguous")
}

/// Unfolds a `[c, h, w]` image into a `[c*k*k, h*w]` column matrix for a
/// same-padded `k x k` convolution.
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * hw;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                    dst[x1..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[c, h, w]` image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            let dy = ky as isize - pad;
            for kx in 0..k {
                let dx = kx as isize - pad;
                let row = ((ci * k + ky) * k + kx) * hw;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + y * w + x0..row + y * w + x1];
                    let s0 = sy as usize * w + (x0 as isize + dx) as usize;
                    for (d, &v) in plane[s0..s0 + (x1 - x0)].iter_mut().zip(src) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 square convolution.
#[derive(Clone, Debug)]
pub(crate) struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    /// `[out_ch, in_ch * k * k]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, k: usize, bias: bool, rng: &mut Rng) -> Self {
        let fan_in = in_ch * k * k;
        let limit = if k == 1 {
            // linear output layer: Glorot uniform
            (6.0 / (fan_in + out_ch) as f64).sqrt()
        } else {
            // He uniform, followed by ReLU
            (6.0 / fan_in as f64).sqrt()
        };
        let weight = Param::new(
            format!("{name}.weight"),
            vec![out_ch, in_ch, k, k],
            uniform(rng, limit, out_ch * fan_in),
        );
        let bias = bias.then(|| Param::new(format!("{name}.bias"), vec![out_ch], vec![T::zero(); out_ch]));
        Self {
            in_ch,
            out_ch,
            k,
            weight,
            bias,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.out_ch, self.in_ch * self.k * self.k), &self.weight.value).unwrap()
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dims(x);
        debug_assert_eq!(c, self.in_ch);
        let hw = h * w;
        let ck = c * self.k * self.k;
        let mut out = Array4::<T>::zeros((n, self.out_ch, h, w));
        let mut cols = vec![T::zero(); if self.k == 1 { 0 } else { ck * hw }];
        let wm = self.weight_matrix();
        let src = as_slice(x);
        let dst = out.as_slice_mut().unwrap();
        for i in 0..n {
            let sample = &src[i * c * hw..(i + 1) * c * hw];
            let colv = if self.k == 1 {
                ArrayView2::from_shape((ck, hw), sample).unwrap()
            } else {
                im2col(sample, c, h, w, self.k, &mut cols);
                ArrayView2::from_shape((ck, hw), &cols[..]).unwrap()
            };
            let chunk = &mut dst[i * self.out_ch * hw..(i + 1) * self.out_ch * hw];
            let mut y = ArrayViewMut2::from_shape((self.out_ch, hw), chunk).unwrap();
            general_mat_mul(T::one(), &wm, &colv, T::zero(), &mut y);
            if let Some(b) = &self.bias {
                for (co, &bv) in b.value.iter().enumerate() {
                    y.row_mut(co).mapv_inplace(|v| v + bv);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns dL/dx when requested.
    pub fn backward(&mut self, x: &Array4<T>, gy: &Array4<T>, need_gx: bool) -> Option<Array4<T>> {
        let (n, c, h, w) = dims(x);
        let hw = h * w;
        let ck = c * self.k * self.k;
        let mut cols = vec![T::zero(); if self.k == 1 { 0 } else { ck * hw }];
        let mut gcols = vec![T::zero(); if need_gx { ck * hw } else { 0 }];
        let mut gx = need_gx.then(|| Array4::<T>::zeros((n, c, h, w)));
        let src = as_slice(x);
        let gsrc = as_slice(gy);
        let weight = self.weight.value.clone();
        let wm = ArrayView2::from_shape((self.out_ch, ck), &weight[..]).unwrap();
        let mut gw = ArrayViewMut2::from_shape((self.out_ch, ck), &mut self.weight.grad[..]).unwrap();
        for i in 0..n {
            let sample = &src[i * c * hw..(i + 1) * c * hw];
            let colv = if self.k == 1 {
                ArrayView2::from_shape((ck, hw), sample).unwrap()
            } else {
                im2col(sample, c, h, w, self.k, &mut cols);
                ArrayView2::from_shape((ck, hw), &cols[..]).unwrap()
            };
            let g = ArrayView2::from_shape(
                (self.out_ch, hw),
                &gsrc[i * self.out_ch * hw..(i + 1) * self.out_ch * hw],
            )
            .unwrap();
            general_mat_mul(T::one(), &g, &colv.t(), T::one(), &mut gw);
            if let Some(b) = self.bias.as_mut() {
                for (co, gb) in b.grad.iter_mut().enumerate() {
                    *gb = *gb + g.row(co).sum();
                }
            }
            if let Some(gx) = gx.as_mut() {
                let gdst = &mut gx.as_slice_mut().unwrap()[i * c * hw..(i + 1) * c * hw];
                if self.k == 1 {
                    let mut gxv = ArrayViewMut2::from_shape((ck, hw), gdst).unwrap();
                    general_mat_mul(T::one(), &wm.t(), &g, T::zero(), &mut gxv);
                } else {
                    let mut gcv = ArrayViewMut2::from_shape((ck, hw), &mut gcols[..]).unwrap();
                    general_mat_mul(T::one(), &wm.t(), &g, T::zero(), &mut gcv);
                    col2im(&gcols, c, h, w, self.k, gdst);
                }
            }
        }
        gx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.weight];
        if let Some(b) = self.bias.as_mut() {
            out.push(b);
        }
        out
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.weight];
        if let Some(b) = self.bias.as_ref() {
            out.push(b);
        }
        out
    }
}

pub(crate) const BN_EPS: f64 = 1e-3;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance, for the running estimate.
    pub batch_var: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(name: &str, ch: usize) -> Self {
        Self {
            gamma: Param::new(format!("{name}.gamma"), vec![ch], vec![T::one(); ch]),
            beta: Param::new(format!("{name}.beta"), vec![ch], vec![T::zero(); ch]),
            running_mean: vec![T::zero(); ch],
            running_var: vec![T::one(); ch],
        }
    }

    pub fn forward_train(&self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (n, c, h, w) = dims(x);
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let src = as_slice(x);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let plane = &src[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                mean[ch] = plane.iter().fold(mean[ch], |a, &v| a + v);
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / count);
        for i in 0..n {
            for ch in 0..c {
                let plane = &src[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                let m = mean[ch];
                var[ch] = plane.iter().fold(var[ch], |a, &v| a + (v - m) * (v - m));
            }
        }
        let eps = T::from_f64(BN_EPS).unwrap();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v / count + eps).sqrt()).collect();
        let unbiased = if n * hw > 1 {
            T::from_usize(n * hw - 1).unwrap()
        } else {
            T::one()
        };
        let batch_var: Vec<T> = var.iter().map(|&v| v / unbiased).collect();

        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        let mut y = Array4::<T>::zeros((n, c, h, w));
        {
            let xs = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                    let (m, s, g, b) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
                    for ((xh, yv), &v) in xs[r.clone()].iter_mut().zip(&mut ys[r.clone()]).zip(&src[r]) {
                        *xh = (v - m) * s;
                        *yv = g * *xh + b;
                    }
                }
            }
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dims(x);
        let hw = h * w;
        let eps = T::from_f64(BN_EPS).unwrap();
        let mut y = x.clone();
        let ys = y.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let s = self.gamma.value[ch] / (self.running_var[ch] + eps).sqrt();
                let b = self.beta.value[ch] - self.running_mean[ch] * s;
                for v in &mut ys[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = *v * s + b;
                }
            }
        }
        y
    }

    pub fn update_running(&mut self, cache: &BnCache<T>) {
        let mom = T::from_f64(BN_MOMENTUM).unwrap();
        let keep = T::one() - mom;
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] = keep * self.running_mean[ch] + mom * cache.batch_mean[ch];
            self.running_var[ch] = keep * self.running_var[ch] + mom * cache.batch_var[ch];
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, gy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dims(gy);
        let hw = h * w;
        let count = T::from_usize(n * hw).unwrap();
        let gs = as_slice(gy);
        let xs = as_slice(&cache.xhat);
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                for (&g, &xh) in gs[r.clone()].iter().zip(&xs[r]) {
                    sum_g[ch] = sum_g[ch] + g;
                    sum_gx[ch] = sum_gx[ch] + g * xh;
                }
            }
        }
        for ch in 0..c {
            self.beta.grad[ch] = self.beta.grad[ch] + sum_g[ch];
            self.gamma.grad[ch] = self.gamma.grad[ch] + sum_gx[ch];
        }
        let mut gx = Array4::<T>::zeros((n, c, h, w));
        let out = gx.as_slice_mut().unwrap();
        for i in 0..n {
            for ch in 0..c {
                let r = (i * c + ch) * hw..(i * c + ch + 1) * hw;
                let scale = self.gamma.value[ch] * cache.inv_std[ch] / count;
                let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                for ((o, &g), &xh) in out[r.clone()].iter_mut().zip(&gs[r.clone()]).zip(&xs[r]) {
                    *o = scale * (count * g - sg - xh * sgx);
                }
            }
        }
        gx
    }
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Gradient through a ReLU given its output.
pub(crate) fn relu_backward<T: Scalar>(out: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
    let mut g = gy.clone();
    g.zip_mut_with(out, |gv, &o| {
        if o <= T::zero() {
            *gv = T::zero();
        }
    });
    g
}

/// 2x2 max pooling; returns the pooled map and the argmax offset per output.
pub(crate) fn max_pool2<T: Scalar>(x: &Array4<T>) -> (Array4<T>, Vec<u8>) {
    let (n, c, h, w) = dims(x);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut arg = vec![0u8; n * c * oh * ow];
    let src = as_slice(x);
    let dst = out.as_slice_mut().unwrap();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        for y in 0..oh {
            for xo in 0..ow {
                let base = 2 * y * w + 2 * xo;
                let cand = [s[base], s[base + 1], s[base + w], s[base + w + 1]];
                let mut best = 0;
                for j in 1..4 {
                    if cand[j] > cand[best] {
                        best = j;
                    }
                }
                let o = plane * oh * ow + y * ow + xo;
                dst[o] = cand[best];
                arg[o] = best as u8;
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool2_backward<T: Scalar>(gy: &Array4<T>, arg: &[u8]) -> Array4<T> {
    let (n, c, oh, ow) = dims(gy);
    let (h, w) = (oh * 2, ow * 2);
    let mut gx = Array4::<T>::zeros((n, c, h, w));
    let gs = as_slice(gy);
    let dst = gx.as_slice_mut().unwrap();
    for plane in 0..n * c {
        for y in 0..oh {
            for xo in 0..ow {
                let o = plane * oh * ow + y * ow + xo;
                let a = arg[o] as usize;
                let idx = plane * h * w + (2 * y + a / 2) * w + 2 * xo + a % 2;
                dst[idx] = gs[o];
            }
        }
    }
    gx
}

/// 2x2 stride-2 transposed convolution doubling the spatial size.
#[derive(Clone, Debug)]
pub(crate) struct ConvTranspose2<T> {
    pub out_ch: usize,
    /// `[out_ch * 4, in_ch]`, row `co * 4 + dy * 2 + dx`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> ConvTranspose2<T> {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / in_ch as f64).sqrt();
        Self {
            out_ch,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, 2, 2, in_ch],
                uniform(rng, limit, out_ch * 4 * in_ch),
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_ch], vec![T::zero(); out_ch]),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dims(x);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let rows = self.out_ch * 4;
        let wm = ArrayView2::from_shape((rows, c), &self.weight.value[..]).unwrap();
        let mut out = Array4::<T>::zeros((n, self.out_ch, oh, ow));
        let mut tmp = ndarray::Array2::<T>::zeros((rows, hw));
        let src = as_slice(x);
        let dst = out.as_slice_mut().unwrap();
        for i in 0..n {
            let xv = ArrayView2::from_shape((c, hw), &src[i * c * hw..(i + 1) * c * hw]).unwrap();
            general_mat_mul(T::one(), &wm, &xv, T::zero(), &mut tmp);
            let t = tmp.as_slice().unwrap();
            for co in 0..self.out_ch {
                let b = self.bias.value[co];
                let plane = &mut dst[(i * self.out_ch + co) * oh * ow..(i * self.out_ch + co + 1) * oh * ow];
                for d in 0..4 {
                    let (dy, dx) = (d / 2, d % 2);
                    let row = &t[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                    for y in 0..h {
                        let orow = (2 * y + dy) * ow;
                        for xx in 0..w {
                            plane[orow + 2 * xx + dx] = row[y * w + xx] + b;
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Array4<T>, gy: &Array4<T>) -> Array4<T> {
        let (n, c, h, w) = dims(x);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let rows = self.out_ch * 4;
        let weight = self.weight.value.clone();
        let wm = ArrayView2::from_shape((rows, c), &weight[..]).unwrap();
        let mut gw = ArrayViewMut2::from_shape((rows, c), &mut self.weight.grad[..]).unwrap();
        let mut gather = ndarray::Array2::<T>::zeros((rows, hw));
        let mut gx = Array4::<T>::zeros((n, c, h, w));
        let src = as_slice(x);
        let gs = as_slice(gy);
        for i in 0..n {
            {
                let gsl = gather.as_slice_mut().unwrap();
                for co in 0..self.out_ch {
                    let plane = &gs[(i * self.out_ch + co) * oh * ow..(i * self.out_ch + co + 1) * oh * ow];
                    self.bias.grad[co] = plane.iter().fold(self.bias.grad[co], |a, &v| a + v);
                    for d in 0..4 {
                        let (dy, dx) = (d / 2, d % 2);
                        let row = &mut gsl[(co * 4 + d) * hw..(co * 4 + d + 1) * hw];
                        for y in 0..h {
                            let orow = (2 * y + dy) * ow;
                            for xx in 0..w {
                                row[y * w + xx] = plane[orow + 2 * xx + dx];
                            }
                        }
                    }
                }
            }
            let xv = ArrayView2::from_shape((c, hw), &src[i * c * hw..(i + 1) * c * hw]).unwrap();
            general_mat_mul(T::one(), &gather, &xv.t(), T::one(), &mut gw);
            let gdst = &mut gx.as_slice_mut().unwrap()[i * c * hw..(i + 1) * c * hw];
            let mut gxv = ArrayViewMut2::from_shape((c, hw), gdst).unwrap();
            general_mat_mul(T::one(), &wm.t(), &gather, T::zero(), &mut gxv);
        }
        gx
    }
}
