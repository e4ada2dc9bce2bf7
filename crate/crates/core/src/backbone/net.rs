//! Trainable networks. Both end in global average pooling, so either accepts
//! any input side at or above its minimum.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{
    cross_entropy, global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv2d, ConvCache, Dense,
    Padding,
};

/// Trainable architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Per-channel means followed by a linear softmax head.
    Linear,
    /// Stride-4 stem, residual block, stride-2 downsampling, residual block,
    /// global average pooling, linear head. `widths` are the channel counts
    /// of the two stages.
    SmallResNet { widths: [usize; 2] },
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture::SmallResNet { widths: [8, 16] }
    }
}

impl Architecture {
    /// Smallest accepted input side.
    pub fn min_side(&self) -> u32 {
        match self {
            Architecture::Linear => 1,
            Architecture::SmallResNet { .. } => 8,
        }
    }
}

/// Input tensor `[3][h][w]`, centered and scaled to roughly [-2, 2].
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub h: usize,
    pub w: usize,
}

impl Tensor {
    pub fn from_image(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = (p[c] as f32 / 255.0 - 0.5) * 4.0;
            }
        }
        Tensor { data, h, w }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    a: Conv2d,
    b: Conv2d,
}

struct BlockCache {
    ca: ConvCache,
    ta: Vec<f32>,
    cb: ConvCache,
    out: Vec<f32>,
}

impl Block {
    fn new<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        Block {
            a: Conv2d::new(c, c, 3, 1, Padding::Circular(1), 1.0, rng),
            // Residual branches start near zero so the block starts near identity.
            b: Conv2d::new(c, c, 3, 1, Padding::Circular(1), 0.1, rng),
        }
    }

    fn forward(&self, x: &[f32], h: usize, w: usize) -> (Vec<f32>, BlockCache) {
        let (mut ta, ca) = self.a.forward(x, h, w);
        relu_inplace(&mut ta);
        let (mut out, cb) = self.b.forward(&ta, h, w);
        out.iter_mut().zip(x).for_each(|(o, &s)| *o += s);
        relu_inplace(&mut out);
        (out.clone(), BlockCache { ca, ta, cb, out })
    }

    /// `grads` holds `[a.w, a.b, b.w, b.b]`.
    fn backward(&self, cache: &BlockCache, dout: &[f32], grads: &mut [Vec<f32>]) -> Vec<f32> {
        let mut dsum = dout.to_vec();
        relu_backward(&cache.out, &mut dsum);
        let (ga, gb) = grads.split_at_mut(2);
        let (gbw, gbb) = gb.split_at_mut(1);
        let mut dta = self
            .b
            .backward(&cache.cb, &dsum, &mut gbw[0], &mut gbb[0], true)
            .unwrap();
        relu_backward(&cache.ta, &mut dta);
        let (gaw, gab) = ga.split_at_mut(1);
        let mut dx = self
            .a
            .backward(&cache.ca, &dta, &mut gaw[0], &mut gab[0], true)
            .unwrap();
        dx.iter_mut().zip(&dsum).for_each(|(d, &s)| *d += s);
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallResNet {
    stem: Conv2d,
    block1: Block,
    down: Conv2d,
    block2: Block,
    head: Dense,
}

impl SmallResNet {
    pub fn new<R: Rng + ?Sized>(widths: [usize; 2], n_classes: usize, rng: &mut R) -> Self {
        let [c1, c2] = widths;
        SmallResNet {
            stem: Conv2d::new(3, c1, 4, 4, Padding::Valid, 1.0, rng),
            block1: Block::new(c1, rng),
            down: Conv2d::new(c1, c2, 2, 2, Padding::Valid, 1.0, rng),
            block2: Block::new(c2, rng),
            head: Dense::new(c2, n_classes, 0.01, rng),
        }
    }

    fn tensors(&self) -> Vec<&Vec<f32>> {
        vec![
            &self.stem.weight,
            &self.stem.bias,
            &self.block1.a.weight,
            &self.block1.a.bias,
            &self.block1.b.weight,
            &self.block1.b.bias,
            &self.down.weight,
            &self.down.bias,
            &self.block2.a.weight,
            &self.block2.a.bias,
            &self.block2.b.weight,
            &self.block2.b.bias,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        vec![
            &mut self.stem.weight,
            &mut self.stem.bias,
            &mut self.block1.a.weight,
            &mut self.block1.a.bias,
            &mut self.block1.b.weight,
            &mut self.block1.b.bias,
            &mut self.down.weight,
            &mut self.down.bias,
            &mut self.block2.a.weight,
            &mut self.block2.a.bias,
            &mut self.block2.b.weight,
            &mut self.block2.b.bias,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }

    fn logits(&self, x: &Tensor) -> Vec<f32> {
        self.run(x, None).0
    }

    /// Forward pass; with a target also runs backward and fills `grads`.
    fn run(&self, x: &Tensor, target: Option<(usize, &mut [Vec<f32>])>) -> (Vec<f32>, f64) {
        let (mut a1, c_stem) = self.stem.forward(&x.data, x.h, x.w);
        relu_inplace(&mut a1);
        let (h1, w1) = self.stem.out_size(x.h, x.w).expect("input above minimum side");
        let (a2, c_b1) = self.block1.forward(&a1, h1, w1);
        let (mut a3, c_down) = self.down.forward(&a2, h1, w1);
        relu_inplace(&mut a3);
        let (h2, w2) = self.down.out_size(h1, w1).expect("input above minimum side");
        let (a4, c_b2) = self.block2.forward(&a3, h2, w2);
        let c2 = self.down.cout;
        let pooled = global_avg_pool(&a4, c2, h2 * w2);
        let logits = self.head.forward(&pooled);

        let Some((target, grads)) = target else {
            return (logits, 0.0);
        };
        let (loss, dlogits) = cross_entropy(&logits, target);
        let (g, g_head) = grads.split_at_mut(12);
        let (ghw, ghb) = g_head.split_at_mut(1);
        let dpooled = self.head.backward(&pooled, &dlogits, &mut ghw[0], &mut ghb[0]);
        let da4 = global_avg_pool_backward(&dpooled, h2 * w2);
        let mut da3 = self.block2.backward(&c_b2, &da4, &mut g[8..12]);
        relu_backward(&a3, &mut da3);
        let (gdw, gdb) = g[6..8].split_at_mut(1);
        let da2 = self
            .down
            .backward(&c_down, &da3, &mut gdw[0], &mut gdb[0], true)
            .unwrap();
        let mut da1 = self.block1.backward(&c_b1, &da2, &mut g[2..6]);
        relu_backward(&a1, &mut da1);
        let (gsw, gsb) = g[0..2].split_at_mut(1);
        self.stem.backward(&c_stem, &da1, &mut gsw[0], &mut gsb[0], false);
        (logits, loss)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearNet {
    head: Dense,
}

impl LinearNet {
    pub fn new<R: Rng + ?Sized>(n_classes: usize, rng: &mut R) -> Self {
        LinearNet {
            head: Dense::new(3, n_classes, 0.01, rng),
        }
    }

    fn run(&self, x: &Tensor, target: Option<(usize, &mut [Vec<f32>])>) -> (Vec<f32>, f64) {
        let pooled = global_avg_pool(&x.data, 3, x.h * x.w);
        let logits = self.head.forward(&pooled);
        let Some((target, grads)) = target else {
            return (logits, 0.0);
        };
        let (loss, dlogits) = cross_entropy(&logits, target);
        let (gw, gb) = grads.split_at_mut(1);
        self.head.backward(&pooled, &dlogits, &mut gw[0], &mut gb[0]);
        (logits, loss)
    }
}

/// A trainable network instance.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Linear(LinearNet),
    SmallResNet(SmallResNet),
}

impl Network {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, n_classes: usize, rng: &mut R) -> Self {
        match arch {
            Architecture::Linear => Network::Linear(LinearNet::new(n_classes, rng)),
            Architecture::SmallResNet { widths } => Network::SmallResNet(SmallResNet::new(*widths, n_classes, rng)),
        }
    }

    pub fn tensors(&self) -> Vec<&Vec<f32>> {
        match self {
            Network::Linear(n) => vec![&n.head.weight, &n.head.bias],
            Network::SmallResNet(n) => n.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f32>> {
        match self {
            Network::Linear(n) => vec![&mut n.head.weight, &mut n.head.bias],
            Network::SmallResNet(n) => n.tensors_mut(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zeroed gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Vec<Vec<f32>> {
        self.tensors().iter().map(|t| vec![0.0; t.len()]).collect()
    }

    pub fn logits(&self, x: &Tensor) -> Vec<f32> {
        match self {
            Network::Linear(n) => n.run(x, None).0,
            Network::SmallResNet(n) => n.logits(x),
        }
    }

    /// Cross-entropy loss, logits and parameter gradients for one sample.
    pub fn loss_and_grads(&self, x: &Tensor, target: usize) -> (f64, Vec<f32>, Vec<Vec<f32>>) {
        let mut grads = self.zero_grads();
        let (logits, loss) = match self {
            Network::Linear(n) => n.run(x, Some((target, &mut grads))),
            Network::SmallResNet(n) => n.run(x, Some((target, &mut grads))),
        };
        (loss, logits, grads)
    }

    /// Parameters flattened in tensor order.
    pub fn to_flat(&self) -> Vec<f32> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    /// Overwrites the parameters from a flat vector; fails on length mismatch.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<(), String> {
        if flat.len() != self.n_params() {
            return Err(format!("expected {} parameters, found {}", self.n_params(), flat.len()));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }
}
