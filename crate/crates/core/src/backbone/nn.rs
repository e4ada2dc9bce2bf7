//! Minimal convolutional building blocks with explicit backward passes.
//!
//! Tensors are single-sample, channel-major `[c][y][x]` `f32` buffers.
//! Convolutions lower to im2col + sgemm.

use matrixmultiply::sgemm;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, all row-major unless strides say
/// otherwise.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the strides describe in-bounds views of `a` and `b` for the
    // given dimensions (checked by the callers' debug asserts) and `c` is a
    // dense m×n row-major buffer.
    unsafe {
        sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Border handling of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding: only windows fully inside the input.
    Valid,
    /// `pad` pixels on every side, wrapping around the opposite border.
    Circular(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: Padding,
    /// `[cout][cin·k·k]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    /// He-normal weights scaled by `gain`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        gain: f32,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let normal = Normal::new(0.0, gain * (2.0 / fan_in as f32).sqrt()).expect("finite std");
        Conv2d {
            cin,
            cout,
            k,
            stride,
            padding,
            weight: (0..cout * fan_in).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; cout],
        }
    }

    fn pad(&self) -> usize {
        match self.padding {
            Padding::Valid => 0,
            Padding::Circular(p) => p,
        }
    }

    /// Output size, or `None` if the input is smaller than the kernel.
    pub fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let p = self.pad();
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        if hp < self.k || wp < self.k {
            return None;
        }
        Some(((hp - self.k) / self.stride + 1, (wp - self.k) / self.stride + 1))
    }

    fn source_index(&self, o: usize, kk: usize, n: usize) -> usize {
        let i = o * self.stride + kk;
        match self.padding {
            Padding::Valid => i,
            Padding::Circular(p) => (i + n - p % n) % n,
        }
    }

    fn im2col(&self, x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
        let p = oh * ow;
        let mut cols = vec![0.0f32; self.cin * self.k * self.k * p];
        let xs: Vec<Vec<usize>> = (0..self.k)
            .map(|kx| (0..ow).map(|ox| self.source_index(ox, kx, w)).collect())
            .collect();
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for xs_k in &xs {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for oy in 0..oh {
                        let src = &plane[self.source_index(oy, ky, h) * w..][..w];
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        for (d, &ix) in dst.iter_mut().zip(xs_k) {
                            *d = src[ix];
                        }
                    }
                    r += 1;
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32], h: usize, w: usize, oh: usize, ow: usize) {
        let p = oh * ow;
        let xs: Vec<Vec<usize>> = (0..self.k)
            .map(|kx| (0..ow).map(|ox| self.source_index(ox, kx, w)).collect())
            .collect();
        let mut r = 0;
        for c in 0..self.cin {
            let plane = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..self.k {
                for xs_k in &xs {
                    let row = &cols[r * p..(r + 1) * p];
                    for oy in 0..oh {
                        let dst = &mut plane[self.source_index(oy, ky, h) * w..][..w];
                        for (&ix, &v) in xs_k.iter().zip(&row[oy * ow..(oy + 1) * ow]) {
                            dst[ix] += v;
                        }
                    }
                    r += 1;
                }
            }
        }
    }

    /// Returns `[cout][oh][ow]` and the cache.
    pub fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, ConvCache) {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let (oh, ow) = self.out_size(h, w).expect("input at least kernel-sized");
        let cols = self.im2col(x, h, w, oh, ow);
        let (kdim, p) = (self.cin * self.k * self.k, oh * ow);
        let mut out = vec![0.0f32; self.cout * p];
        for (o, b) in self.bias.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(*b);
        }
        gemm(
            self.cout,
            kdim,
            p,
            &self.weight,
            (kdim as isize, 1),
            &cols,
            (p as isize, 1),
            1.0,
            &mut out,
        );
        (out, ConvCache { cols, h, w, oh, ow })
    }

    /// Accumulates parameter gradients into `dw`, `db` and returns the input
    /// gradient when `want_dx`.
    pub fn backward(
        &self,
        cache: &ConvCache,
        dout: &[f32],
        dw: &mut [f32],
        db: &mut [f32],
        want_dx: bool,
    ) -> Option<Vec<f32>> {
        let (kdim, p) = (self.cin * self.k * self.k, cache.oh * cache.ow);
        debug_assert_eq!(dout.len(), self.cout * p);
        for (o, g) in db.iter_mut().enumerate() {
            *g += dout[o * p..(o + 1) * p].iter().sum::<f32>();
        }
        // dW[cout×kdim] += dout[cout×p] · colsᵀ[p×kdim]
        gemm(
            self.cout,
            p,
            kdim,
            dout,
            (p as isize, 1),
            &cache.cols,
            (1, p as isize),
            1.0,
            dw,
        );
        if !want_dx {
            return None;
        }
        // dcols[kdim×p] = Wᵀ[kdim×cout] · dout[cout×p]
        let mut dcols = vec![0.0f32; kdim * p];
        gemm(
            kdim,
            self.cout,
            p,
            &self.weight,
            (1, kdim as isize),
            dout,
            (p as isize, 1),
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0f32; self.cin * cache.h * cache.w];
        self.col2im(&dcols, &mut dx, cache.h, cache.w, cache.oh, cache.ow);
        Some(dx)
    }
}

pub fn relu_inplace(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes gradient entries where the ReLU output was not positive.
pub fn relu_backward(out: &[f32], grad: &mut [f32]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Per-channel spatial mean: the size-erasing pooling stage.
pub fn global_avg_pool(x: &[f32], c: usize, hw: usize) -> Vec<f32> {
    (0..c)
        .map(|i| (x[i * hw..(i + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
        .collect()
}

pub fn global_avg_pool_backward(dpooled: &[f32], hw: usize) -> Vec<f32> {
    dpooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / hw as f32, hw))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub nin: usize,
    pub nout: usize,
    /// `[nout][nin]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(nin: usize, nout: usize, std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Dense {
            nin,
            nout,
            weight: (0..nin * nout).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; nout],
        }
    }

    pub fn forward(&self, x: &[f32]) -> Vec<f32> {
        (0..self.nout)
            .map(|o| {
                let row = &self.weight[o * self.nin..(o + 1) * self.nin];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f32>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f32], dout: &[f32], dw: &mut [f32], db: &mut [f32]) -> Vec<f32> {
        let mut dx = vec![0.0f32; self.nin];
        for o in 0..self.nout {
            db[o] += dout[o];
            let row = &self.weight[o * self.nin..(o + 1) * self.nin];
            for i in 0..self.nin {
                dw[o * self.nin + i] += dout[o] * x[i];
                dx[i] += dout[o] * row[i];
            }
        }
        dx
    }
}

/// Softmax computed in `f64` and renormalized so the entries sum to one.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exp: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / z).collect()
}

/// Cross-entropy loss and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], target: usize) -> (f64, Vec<f32>) {
    let p = softmax(logits);
    let loss = -p[target].max(1e-300).ln();
    let grad = p
        .iter()
        .enumerate()
        .map(|(i, &pi)| (pi - if i == target { 1.0 } else { 0.0 }) as f32)
        .collect();
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_brute(conv: &Conv2d, x: &[f32], h: usize, w: usize) -> Vec<f32> {
        let (oh, ow) = conv.out_size(h, w).unwrap();
        let p = conv.pad() as i64;
        let mut out = vec![0.0f32; conv.cout * oh * ow];
        for o in 0..conv.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o] as f64;
                    for c in 0..conv.cin {
                        for ky in 0..conv.k {
                            for kx in 0..conv.k {
                                let iy = (oy * conv.stride + ky) as i64 - p;
                                let ix = (ox * conv.stride + kx) as i64 - p;
                                let (iy, ix) = (iy.rem_euclid(h as i64) as usize, ix.rem_euclid(w as i64) as usize);
                                let wv = conv.weight[((o * conv.cin + c) * conv.k + ky) * conv.k + kx];
                                acc += (wv * x[(c * h + iy) * w + ix]) as f64;
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
        out
    }

    fn random_input(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (k, s, pad, h, w) in [
            (3, 1, Padding::Circular(1), 5, 7),
            (4, 4, Padding::Valid, 13, 9),
            (2, 2, Padding::Valid, 6, 6),
            (3, 1, Padding::Circular(1), 1, 1),
        ] {
            let mut conv = Conv2d::new(2, 3, k, s, pad, 1.0, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3];
            let x = random_input(2 * h * w, &mut rng);
            let (fast, _) = conv.forward(&x, h, w);
            let slow = conv_brute(&conv, &x, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (k, s, pad, h, w) in [(3, 1, Padding::Circular(1), 4, 5), (2, 2, Padding::Valid, 6, 4)] {
            let conv = Conv2d::new(2, 2, k, s, pad, 1.0, &mut rng);
            let x = random_input(2 * h * w, &mut rng);
            let (out, cache) = conv.forward(&x, h, w);
            // Loss = Σ out · g for a fixed random g.
            let g = random_input(out.len(), &mut rng);
            let loss = |conv: &Conv2d, x: &[f32]| -> f64 {
                conv.forward(x, h, w)
                    .0
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| (a * b) as f64)
                    .sum()
            };
            let mut dw = vec![0.0; conv.weight.len()];
            let mut db = vec![0.0; conv.bias.len()];
            let dx = conv.backward(&cache, &g, &mut dw, &mut db, true).unwrap();
            let eps = 1e-2f32;
            for (i, &dwi) in dw.iter().enumerate() {
                let (mut up, mut dn) = (conv.clone(), conv.clone());
                up.weight[i] += eps;
                dn.weight[i] -= eps;
                let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * eps as f64);
                assert!((fd - dwi as f64).abs() < 1e-2, "dw[{i}] {fd} vs {dwi}");
            }
            for i in 0..x.len() {
                let (mut up, mut dn) = (x.clone(), x.clone());
                up[i] += eps;
                dn[i] -= eps;
                let fd = (loss(&conv, &up) - loss(&conv, &dn)) / (2.0 * eps as f64);
                assert!((fd - dx[i] as f64).abs() < 1e-2, "dx[{i}] {fd} vs {}", dx[i]);
            }
            let sum_g: Vec<f32> = (0..conv.cout)
                .map(|o| {
                    g[o * out.len() / conv.cout..(o + 1) * out.len() / conv.cout]
                        .iter()
                        .sum()
                })
                .collect();
            for (a, b) in db.iter().zip(&sum_g) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dense = Dense::new(4, 3, 0.5, &mut rng);
        let x = random_input(4, &mut rng);
        let target = 1;
        let (_, dlogits) = cross_entropy(&dense.forward(&x), target);
        let mut dw = vec![0.0; 12];
        let mut db = vec![0.0; 3];
        let dx = dense.backward(&x, &dlogits, &mut dw, &mut db);
        let loss = |d: &Dense, x: &[f32]| cross_entropy(&d.forward(x), target).0;
        let eps = 1e-3f32;
        for (i, &dwi) in dw.iter().enumerate() {
            let (mut up, mut dn) = (dense.clone(), dense.clone());
            up.weight[i] += eps;
            dn.weight[i] -= eps;
            let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * eps as f64);
            assert!((fd - dwi as f64).abs() < 1e-3);
        }
        for i in 0..4 {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[i] += eps;
            dn[i] -= eps;
            let fd = (loss(&dense, &up) - loss(&dense, &dn)) / (2.0 * eps as f64);
            assert!((fd - dx[i] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn softmax_is_normalized() {
        for logits in [vec![0.0f32, 0.0], vec![1000.0, -1000.0, 3.0], vec![-5.0; 6]] {
            let p = softmax(&logits);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pooling_round_trip() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 10.0];
        assert_eq!(global_avg_pool(&x, 2, 4), vec![2.5, 10.0]);
        assert_eq!(
            global_avg_pool_backward(&[4.0, 8.0], 4),
            vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]
        );
    }
}
