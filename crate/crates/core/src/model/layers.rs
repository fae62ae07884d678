//! Convolution, batch normalization and pooling with cached backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::{gemm, Tensor};

/// A learnable tensor with its gradient and SGD momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Momentum SGD with L2 weight decay.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) {
        for ((w, g), v) in self.value.iter_mut().zip(&self.grad).zip(self.velocity.iter_mut()) {
            let d = g + weight_decay * *w;
            *v = momentum * *v + d;
            *w -= lr * *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// Row-major `out_c × (in_c · kernel²)`.
    pub weight: Param,
}

impl Conv2d {
    /// He-normal initialization over fan-out.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let fan_out = (out_c * kernel * kernel) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("finite std");
        let weight = (0..out_c * in_c * kernel * kernel).map(|_| normal.sample(rng)).collect();
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::new(weight),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize, col: &mut [f32]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [f32]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &col[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let kdim = self.in_c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut out = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; kdim * ohw] };
        for i in 0..x.n {
            let xs = x.sample(i);
            let b: &[f32] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut col);
                &col
            };
            gemm(self.out_c, kdim, ohw, &self.weight.value, (kdim, 1), b, (ohw, 1), 0.0, out.sample_mut(i));
        }
        out
    }

    /// Accumulates the weight gradient and returns the input gradient when
    /// requested.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (oh, ow) = (dy.h, dy.w);
        let kdim = self.in_c * self.kernel * self.kernel;
        let ohw = oh * ow;
        let mut col = if self.is_pointwise() { Vec::new() } else { vec![0.0; kdim * ohw] };
        let mut dcol = vec![0.0; kdim * ohw];
        let mut dx = need_dx.then(|| Tensor::zeros(x.n, x.c, x.h, x.w));
        for i in 0..x.n {
            let xs = x.sample(i);
            let b: &[f32] = if self.is_pointwise() {
                xs
            } else {
                self.im2col(xs, x.h, x.w, oh, ow, &mut col);
                &col
            };
            let dys = dy.sample(i);
            // dW += dy · colᵀ
            gemm(self.out_c, ohw, kdim, dys, (ohw, 1), b, (1, ohw), 1.0, &mut self.weight.grad);
            if let Some(dx) = dx.as_mut() {
                // dcol = Wᵀ · dy
                gemm(kdim, self.out_c, ohw, &self.weight.value, (1, kdim), dys, (ohw, 1), 0.0, &mut dcol);
                if self.is_pointwise() {
                    dx.sample_mut(i).copy_from_slice(&dcol);
                } else {
                    self.col2im(&dcol, x.h, x.w, oh, ow, dx.sample_mut(i));
                }
            }
        }
        dx
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; c]),
            beta: Param::new(vec![0.0; c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        let hw = x.h * x.w;
        for ch in 0..x.c {
            let scale = self.gamma.value[ch] / (self.running_var[ch] + BN_EPS).sqrt();
            let shift = self.beta.value[ch] - self.running_mean[ch] * scale;
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                for v in &mut y.data[off..off + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        y
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnCache) {
        let hw = x.h * x.w;
        let m = (x.n * hw) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_std = vec![0.0f32; x.c];
        for ch in 0..x.c {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                sum += x.data[off..off + hw].iter().map(|&v| f64::from(v)).sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                sq += x.data[off..off + hw].iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>();
            }
            let var = sq / m;
            let istd = 1.0 / (var + f64::from(BN_EPS)).sqrt();
            inv_std[ch] = istd as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..x.n {
                let off = (i * x.c + ch) * hw;
                for j in off..off + hw {
                    let xh = ((f64::from(x.data[j]) - mean) * istd) as f32;
                    xhat.data[j] = xh;
                    y.data[j] = g * xh + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean as f32;
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased as f32;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BnCache, dy: &Tensor) -> Tensor {
        let hw = dy.h * dy.w;
        let m = (dy.n * hw) as f32;
        let mut dx = dy.clone();
        for ch in 0..dy.c {
            let mut dgamma = 0.0f64;
            let mut dbeta = 0.0f64;
            for i in 0..dy.n {
                let off = (i * dy.c + ch) * hw;
                for j in off..off + hw {
                    dgamma += f64::from(dy.data[j]) * f64::from(cache.xhat.data[j]);
                    dbeta += f64::from(dy.data[j]);
                }
            }
            self.gamma.grad[ch] += dgamma as f32;
            self.beta.grad[ch] += dbeta as f32;
            let k = self.gamma.value[ch] * cache.inv_std[ch] / m;
            let (dg, db) = (dgamma as f32, dbeta as f32);
            for i in 0..dy.n {
                let off = (i * dy.c + ch) * hw;
                for j in off..off + hw {
                    dx.data[j] = k * (m * dy.data[j] - db - cache.xhat.data[j] * dg);
                }
            }
        }
        dx
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
    cache: Option<(Tensor, BnCache, Tensor)>,
}

impl PartialEq for ConvBn {
    fn eq(&self, other: &Self) -> bool {
        self.conv == other.conv && self.bn == other.bn && self.relu == other.relu
    }
}

fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

impl ConvBn {
    pub fn new(conv: Conv2d, relu: bool) -> Self {
        let bn = BatchNorm2d::new(conv.out_c);
        ConvBn {
            conv,
            bn,
            relu,
            cache: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.bn.forward_eval(&self.conv.forward(x));
        if self.relu {
            relu_inplace(&mut y);
        }
        y
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Tensor {
        let z = self.conv.forward(x);
        let (mut y, bn_cache) = self.bn.forward_train(&z);
        if self.relu {
            relu_inplace(&mut y);
        }
        self.cache = Some((x.clone(), bn_cache, y.clone()));
        y
    }

    pub fn backward(&mut self, mut dy: Tensor, need_dx: bool) -> Option<Tensor> {
        let (x, bn_cache, y) = self.cache.take().expect("backward after forward_train");
        if self.relu {
            for (d, &o) in dy.data.iter_mut().zip(&y.data) {
                if o <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let dz = self.bn.backward(&bn_cache, &dy);
        self.conv.backward(&x, &dz, need_dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.conv.weight, &mut self.bn.gamma, &mut self.bn.beta]
    }

    /// Every stored array, in checkpoint order.
    pub fn arrays(&self) -> [&Vec<f32>; 5] {
        [
            &self.conv.weight.value,
            &self.bn.gamma.value,
            &self.bn.beta.value,
            &self.bn.running_mean,
            &self.bn.running_var,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f32>; 5] {
        [
            &mut self.conv.weight.value,
            &mut self.bn.gamma.value,
            &mut self.bn.beta.value,
            &mut self.bn.running_mean,
            &mut self.bn.running_var,
        ]
    }
}

/// 3×3 max pooling, stride 2, padding 1.
pub fn maxpool_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let (oh, ow) = ((x.h + 2 - 3) / 2 + 1, (x.w + 2 - 3) / 2 + 1);
    let mut out = Tensor::zeros(x.n, x.c, oh, ow);
    let mut arg = vec![0u32; out.data.len()];
    for plane in 0..x.n * x.c {
        let src = &x.data[plane * x.h * x.w..(plane + 1) * x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_at = 0usize;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= x.w as isize {
                            continue;
                        }
                        let at = iy as usize * x.w + ix as usize;
                        if src[at] > best {
                            best = src[at];
                            best_at = at;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                out.data[o] = best;
                arg[o] = best_at as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward(x_shape: [usize; 4], arg: &[u32], dy: &Tensor) -> Tensor {
    let [n, c, h, w] = x_shape;
    let mut dx = Tensor::zeros(n, c, h, w);
    let ohw = dy.h * dy.w;
    for plane in 0..n * c {
        for j in 0..ohw {
            let o = plane * ohw + j;
            dx.data[plane * h * w + arg[o] as usize] += dy.data[o];
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape[0], shape[1], shape[2], shape[3], data)
    }

    /// Direct nested-loop convolution.
    fn naive_conv(conv: &Conv2d, x: &Tensor) -> Tensor {
        let (oh, ow) = conv.out_size(x.h, x.w);
        let k = conv.kernel;
        let mut out = Tensor::zeros(x.n, conv.out_c, oh, ow);
        for n in 0..x.n {
            for o in 0..conv.out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f64;
                        for ci in 0..conv.in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.value[((o * conv.in_c + ci) * k + ky) * k + kx];
                                    let xv = x.data[((n * x.c + ci) * x.h + iy as usize) * x.w + ix as usize];
                                    s += f64::from(wv) * f64::from(xv);
                                }
                            }
                        }
                        out.data[((n * conv.out_c + o) * oh + oy) * ow + ox] = s as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (7, 2, 3)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            let x = rand_tensor(&mut rng, [2, 3, 9, 8]);
            let got = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "k={k} s={s}: {a} vs {b}");
            }
        }
    }

    /// Loss = Σ r ⊙ f(x) for a fixed random r; compares analytic gradients
    /// with central differences in f64 on the naive path.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s, p) in &[(3, 2, 1), (1, 1, 0), (3, 1, 1)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, &mut rng);
            let x = rand_tensor(&mut rng, [2, 2, 5, 6]);
            let y = conv.forward(&x);
            let r = rand_tensor(&mut rng, y.shape());
            let dx = conv.backward(&x, &r, true).unwrap();
            let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
                naive_conv(conv, x).data.iter().zip(&r.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
            };
            let eps = 1e-2f32;
            for idx in [0, 5, conv.weight.value.len() - 1] {
                let mut plus = conv.clone();
                plus.weight.value[idx] += eps;
                let mut minus = conv.clone();
                minus.weight.value[idx] -= eps;
                let num = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * f64::from(eps));
                assert!((num - f64::from(conv.weight.grad[idx])).abs() < 1e-2, "dW {num} vs {}", conv.weight.grad[idx]);
            }
            for idx in [0, 17, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += eps;
                let mut xm = x.clone();
                xm.data[idx] -= eps;
                let num = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * f64::from(eps));
                assert!((num - f64::from(dx.data[idx])).abs() < 1e-2, "dx {num} vs {}", dx.data[idx]);
            }
        }
    }

    #[test]
    fn convbn_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut unit = ConvBn::new(Conv2d::new(2, 3, 3, 1, 1, &mut rng), true);
        unit.bn.gamma.value = vec![1.5, 0.7, 1.1];
        unit.bn.beta.value = vec![0.1, -0.2, 0.3];
        let x = rand_tensor(&mut rng, [3, 2, 4, 4]);
        let r = rand_tensor(&mut rng, [3, 3, 4, 4]);
        let loss = |u: &ConvBn, x: &Tensor| -> f64 {
            let mut u = u.clone();
            let y = u.forward_train(x);
            y.data.iter().zip(&r.data).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum()
        };
        let mut work = unit.clone();
        work.forward_train(&x);
        let dx = work.backward(r.clone(), true).unwrap();
        let eps = 1e-3f32;
        for idx in [0, 9, 30, 47] {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            let num = (loss(&unit, &xp) - loss(&unit, &xm)) / (2.0 * f64::from(eps));
            assert!((num - f64::from(dx.data[idx])).abs() < 2e-2, "dx[{idx}] {num} vs {}", dx.data[idx]);
        }
        for ch in 0..3 {
            let mut p = unit.clone();
            p.bn.gamma.value[ch] += eps;
            let mut m = unit.clone();
            m.bn.gamma.value[ch] -= eps;
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * f64::from(eps));
            assert!((num - f64::from(work.bn.gamma.grad[ch])).abs() < 2e-2);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::from_vec(1, 1, 4, 4, (0..16).map(|v| v as f32).collect());
        let (y, arg) = maxpool_forward(&x);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let dy = Tensor::from_vec(1, 1, 2, 2, vec![1.0; 4]);
        let dx = maxpool_backward(x.shape(), &arg, &dy);
        assert_eq!(dx.data[5], 1.0);
        assert_eq!(dx.data[15], 1.0);
        assert_eq!(dx.data.iter().sum::<f32>(), 4.0);
    }

    #[test]
    fn eval_bn_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - BN_EPS];
        let y = bn.forward_eval(&Tensor::from_vec(1, 1, 1, 2, vec![2.0, 6.0]));
        assert!((y.data[0]).abs() < 1e-6 && (y.data[1] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn sgd_step_descends() {
        let mut p = Param::new(vec![1.0]);
        p.grad = vec![2.0];
        p.sgd_step(0.1, 0.9, 0.0);
        assert!((p.value[0] - 0.8).abs() < 1e-7);
        p.sgd_step(0.1, 0.9, 0.0);
        // velocity 0.9*2 + 2 = 3.8
        assert!((p.value[0] - 0.42).abs() < 1e-6);
    }
}
