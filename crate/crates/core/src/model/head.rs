//! The 1×1 convolution classifier head and its loss.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

/// 1×1 convolution mapping backbone features to one spatial map per class.
/// Kept in double precision so that scores are exact functions of the maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub in_c: usize,
    pub n_classes: usize,
    /// Row-major `n_classes × in_c`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
    vel_w: Vec<f64>,
    vel_b: Vec<f64>,
}

/// Per-sample head output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub h: usize,
    pub w: usize,
    /// `n_classes` maps of `h · w` values.
    pub maps: Vec<Vec<f64>>,
    /// Spatial mean of each map.
    pub logits: Vec<f64>,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Head {
    /// Zero-mean normal weights with variance `1 / in_c`, zero bias.
    pub fn new(in_c: usize, n_classes: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (1.0 / in_c as f64).sqrt()).expect("finite std");
        let weight = (0..in_c * n_classes).map(|_| normal.sample(rng)).collect();
        Self::from_parts(in_c, n_classes, weight, vec![0.0; n_classes])
    }

    pub fn from_parts(in_c: usize, n_classes: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), in_c * n_classes);
        assert_eq!(bias.len(), n_classes);
        Head {
            in_c,
            n_classes,
            weight,
            bias,
            grad_w: vec![0.0; in_c * n_classes],
            grad_b: vec![0.0; n_classes],
            vel_w: vec![0.0; in_c * n_classes],
            vel_b: vec![0.0; n_classes],
        }
    }

    pub fn forward(&self, features: &Tensor) -> Vec<HeadOutput> {
        assert_eq!(features.c, self.in_c, "head input channels");
        let hw = features.h * features.w;
        (0..features.n)
            .map(|i| {
                let f = features.sample(i);
                let maps: Vec<Vec<f64>> = (0..self.n_classes)
                    .map(|c| {
                        let wrow = &self.weight[c * self.in_c..(c + 1) * self.in_c];
                        let mut m = vec![self.bias[c]; hw];
                        for (k, &wk) in wrow.iter().enumerate() {
                            let plane = &f[k * hw..(k + 1) * hw];
                            for (mv, &fv) in m.iter_mut().zip(plane) {
                                *mv += wk * f64::from(fv);
                            }
                        }
                        m
                    })
                    .collect();
                let logits = maps.iter().map(|m| m.iter().sum::<f64>() / hw as f64).collect();
                HeadOutput {
                    h: features.h,
                    w: features.w,
                    maps,
                    logits,
                }
            })
            .collect()
    }

    /// Accumulates parameter gradients from `dlogits` (`n × n_classes`) and
    /// returns the gradient with respect to the features.
    pub fn backward(&mut self, features: &Tensor, dlogits: &[Vec<f64>]) -> Tensor {
        let hw = features.h * features.w;
        let mut dx = Tensor::zeros(features.n, features.c, features.h, features.w);
        for (i, dl) in dlogits.iter().enumerate() {
            let f = features.sample(i);
            for k in 0..self.in_c {
                let pooled = f[k * hw..(k + 1) * hw].iter().map(|&v| f64::from(v)).sum::<f64>() / hw as f64;
                let mut dfeat = 0.0;
                for c in 0..self.n_classes {
                    self.grad_w[c * self.in_c + k] += dl[c] * pooled;
                    dfeat += dl[c] * self.weight[c * self.in_c + k];
                }
                let g = (dfeat / hw as f64) as f32;
                dx.sample_mut(i)[k * hw..(k + 1) * hw].iter_mut().for_each(|v| *v = g);
            }
            for c in 0..self.n_classes {
                self.grad_b[c] += dl[c];
            }
        }
        dx
    }

    pub fn zero_grad(&mut self) {
        self.grad_w.iter_mut().for_each(|g| *g = 0.0);
        self.grad_b.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for ((w, g), v) in self.weight.iter_mut().zip(&self.grad_w).zip(self.vel_w.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
        for ((b, g), v) in self.bias.iter_mut().zip(&self.grad_b).zip(self.vel_b.iter_mut()) {
            *v = momentum * *v + g;
            *b -= lr * *v;
        }
    }
}

/// Mean binary cross-entropy over samples and classes, computed from logits
/// in the numerically stable form, with its gradient.
pub fn bce_with_logits(logits: &[Vec<f64>], targets: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = logits[0].len();
    let scale = 1.0 / (n * c) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (z_row, y_row) in logits.iter().zip(targets) {
        let mut g = Vec::with_capacity(c);
        for (&z, &y) in z_row.iter().zip(y_row) {
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            g.push((sigmoid(z) - y) * scale);
        }
        grads.push(g);
    }
    (loss * scale, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sigmoid_is_stable_and_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = vec![vec![0.3, -1.2], vec![2.0, 0.0]];
        let targets = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (loss, _) = bce_with_logits(&logits, &targets);
        let mut want = 0.0;
        for (zr, yr) in logits.iter().zip(&targets) {
            for (&z, &y) in zr.iter().zip(yr) {
                let s = 1.0 / (1.0 + (-z as f64).exp());
                want -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
            }
        }
        assert!((loss - want / 4.0).abs() < 1e-12);
    }

    #[test]
    fn logits_are_map_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = Head::new(4, 3, &mut rng);
        let f = Tensor::from_vec(1, 4, 2, 2, (0..16).map(|v| v as f32 * 0.1).collect());
        let out = &head.forward(&f)[0];
        for (m, &l) in out.maps.iter().zip(&out.logits) {
            assert!((m.iter().sum::<f64>() / 4.0 - l).abs() < 1e-12);
        }
        assert!(head.bias.iter().all(|&b| b == 0.0));
    }
}
