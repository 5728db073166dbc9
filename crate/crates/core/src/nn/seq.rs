//! Sequential containers: the convolutional encoder and the MLP heads.

use rand::Rng;

use super::{
    relu_backward, relu_inplace, Batch4, BatchNorm, BatchNormCache, Conv2d, ConvCache, Linear,
    LinearCache, Mat, Module, NamedTensor, Param, Real,
};

/// Conv -> BatchNorm -> ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

#[derive(Debug)]
struct BlockCache<T> {
    conv: ConvCache<T>,
    bn: BatchNormCache<T>,
    out: Vec<T>,
    out_shape: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub blocks: Vec<ConvBlock<T>>,
}

#[derive(Debug)]
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> Encoder<T> {
    /// Builds `channels.len()` conv blocks starting from `in_channels`.
    pub fn new<R: Rng>(in_channels: usize, channels: &[usize], strides: &[usize], rng: &mut R) -> Self {
        assert_eq!(channels.len(), strides.len());
        let mut prev = in_channels;
        let blocks = channels
            .iter()
            .zip(strides)
            .map(|(&c, &s)| {
                let block = ConvBlock {
                    conv: Conv2d::new(prev, c, 3, s, rng),
                    bn: BatchNorm::new(c, true),
                };
                prev = c;
                block
            })
            .collect();
        Self { blocks }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.conv.out_channels)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.blocks
            .iter()
            .fold((h, w), |(h, w), b| b.conv.out_size(h, w))
    }

    pub fn forward_train(&mut self, x: &Batch4<T>) -> (Batch4<T>, EncoderCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for block in &mut self.blocks {
            let (y, conv_cache) = block.conv.forward(&cur);
            let (mut z, bn_cache) = block.bn.forward_train(&y.data, y.n, y.h * y.w);
            relu_inplace(&mut z);
            caches.push(BlockCache {
                conv: conv_cache,
                bn: bn_cache,
                out: z.clone(),
                out_shape: (y.n, y.c, y.h, y.w),
            });
            cur = Batch4::from_vec(y.n, y.c, y.h, y.w, z);
        }
        (cur, EncoderCache { blocks: caches })
    }

    pub fn forward_eval(&self, x: &Batch4<T>) -> Batch4<T> {
        let mut cur = x.clone();
        for block in &self.blocks {
            let (y, _) = block.conv.forward(&cur);
            let mut z = block.bn.forward_eval(&y.data, y.n, y.h * y.w);
            relu_inplace(&mut z);
            cur = Batch4::from_vec(y.n, y.c, y.h, y.w, z);
        }
        cur
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&mut self, d_out: &Batch4<T>, cache: &EncoderCache<T>) -> Batch4<T> {
        let mut grad = d_out.clone();
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            let (n, c, h, w) = bc.out_shape;
            assert_eq!((grad.n, grad.c, grad.h, grad.w), (n, c, h, w));
            relu_backward(&bc.out, &mut grad.data);
            let dy = block.bn.backward(&grad.data, &bc.bn);
            grad = block.conv.backward(&Batch4::from_vec(n, c, h, w, dy), &bc.conv);
        }
        grad
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for b in &mut self.blocks {
            b.conv.params_mut(out);
            b.bn.params_mut(out);
        }
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for b in &self.blocks {
            b.conv.params(out);
            b.bn.params(out);
        }
    }

    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.state(&format!("{prefix}.{i}.conv"), out);
            b.bn.state(&format!("{prefix}.{i}.bn"), out);
        }
    }

    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String> {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.load_state(&format!("{prefix}.{i}.conv"), lookup)?;
            b.bn.load_state(&format!("{prefix}.{i}.bn"), lookup)?;
        }
        Ok(())
    }
}

/// `[n, c, h, w] -> [n, c]` spatial mean.
pub fn global_avg_pool<T: Real>(x: &Batch4<T>) -> Mat<T> {
    let s = x.h * x.w;
    let inv = T::one() / T::from_usize(s).unwrap();
    let mut out = Mat::zeros(x.n, x.c);
    for i in 0..x.n {
        for ch in 0..x.c {
            let plane = &x.data[(i * x.c + ch) * s..(i * x.c + ch + 1) * s];
            let mut acc = T::zero();
            for &v in plane {
                acc += v;
            }
            out.data[i * x.c + ch] = acc * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Real>(dy: &Mat<T>, h: usize, w: usize) -> Batch4<T> {
    let s = h * w;
    let inv = T::one() / T::from_usize(s).unwrap();
    let mut dx = Batch4::zeros(dy.rows, dy.cols, h, w);
    for (plane, &g) in dx.data.chunks_mut(s).zip(&dy.data) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

#[derive(Debug, Clone)]
pub enum MlpLayer<T> {
    Linear(Linear<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
}

#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<MlpLayer<T>>,
}

#[derive(Debug)]
enum LayerCache<T> {
    Linear(LinearCache<T>),
    BatchNorm(BatchNormCache<T>),
    Relu(Vec<T>),
}

#[derive(Debug)]
pub struct MlpCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> Mlp<T> {
    /// `Linear -> BN -> ReLU` for every hidden width, then a final `Linear`,
    /// optionally followed by a BN (affine or not) on the output.
    pub fn new<R: Rng>(
        input: usize,
        hidden: &[usize],
        output: usize,
        output_bn: Option<bool>,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(MlpLayer::Linear(Linear::new(prev, h, rng)));
            layers.push(MlpLayer::BatchNorm(BatchNorm::new(h, true)));
            layers.push(MlpLayer::Relu);
            prev = h;
        }
        layers.push(MlpLayer::Linear(Linear::new(prev, output, rng)));
        if let Some(affine) = output_bn {
            layers.push(MlpLayer::BatchNorm(BatchNorm::new(output, affine)));
        }
        Self { layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                MlpLayer::Linear(lin) => Some(lin.out_features),
                _ => None,
            })
            .unwrap_or(0)
    }

    pub fn forward_train(&mut self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            match layer {
                MlpLayer::Linear(lin) => {
                    let (y, c) = lin.forward(&cur);
                    caches.push(LayerCache::Linear(c));
                    cur = y;
                }
                MlpLayer::BatchNorm(bn) => {
                    let (y, c) = bn.forward_train(&cur.data, cur.rows, 1);
                    caches.push(LayerCache::BatchNorm(c));
                    cur = Mat::from_vec(cur.rows, cur.cols, y);
                }
                MlpLayer::Relu => {
                    relu_inplace(&mut cur.data);
                    caches.push(LayerCache::Relu(cur.data.clone()));
                }
            }
        }
        (cur, MlpCache { layers: caches })
    }

    pub fn forward_eval(&self, x: &Mat<T>) -> Mat<T> {
        let mut cur = x.clone();
        for layer in &self.layers {
            match layer {
                MlpLayer::Linear(lin) => cur = lin.apply(&cur),
                MlpLayer::BatchNorm(bn) => {
                    cur = Mat::from_vec(cur.rows, cur.cols, bn.forward_eval(&cur.data, cur.rows, 1))
                }
                MlpLayer::Relu => relu_inplace(&mut cur.data),
            }
        }
        cur
    }

    pub fn backward(&mut self, dy: &Mat<T>, cache: &MlpCache<T>) -> Mat<T> {
        let mut grad = dy.clone();
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers).rev() {
            match (layer, lc) {
                (MlpLayer::Linear(lin), LayerCache::Linear(c)) => grad = lin.backward(&grad, c),
                (MlpLayer::BatchNorm(bn), LayerCache::BatchNorm(c)) => {
                    grad = Mat::from_vec(grad.rows, grad.cols, bn.backward(&grad.data, c))
                }
                (MlpLayer::Relu, LayerCache::Relu(out)) => relu_backward(out, &mut grad.data),
                _ => unreachable!("cache does not match layer stack"),
            }
        }
        grad
    }
}

impl<T: Real> Module<T> for Mlp<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        for l in &mut self.layers {
            match l {
                MlpLayer::Linear(lin) => lin.params_mut(out),
                MlpLayer::BatchNorm(bn) => bn.params_mut(out),
                MlpLayer::Relu => {}
            }
        }
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        for l in &self.layers {
            match l {
                MlpLayer::Linear(lin) => lin.params(out),
                MlpLayer::BatchNorm(bn) => bn.params(out),
                MlpLayer::Relu => {}
            }
        }
    }

    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                MlpLayer::Linear(lin) => lin.state(&format!("{prefix}.{i}"), out),
                MlpLayer::BatchNorm(bn) => bn.state(&format!("{prefix}.{i}"), out),
                MlpLayer::Relu => {}
            }
        }
    }

    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                MlpLayer::Linear(lin) => lin.load_state(&format!("{prefix}.{i}"), lookup)?,
                MlpLayer::BatchNorm(bn) => bn.load_state(&format!("{prefix}.{i}"), lookup)?,
                MlpLayer::Relu => {}
            }
        }
        Ok(())
    }
}
