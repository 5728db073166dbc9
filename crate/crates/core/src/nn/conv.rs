//! 2-D convolution via im2col with replicate (edge-clamped) padding.
//!
//! Replicate padding keeps a spatially constant input constant through the
//! whole encoder, so a flat image produces a flat response map.

use rand::Rng;

use super::{matmul, Batch4, Module, NamedTensor, Param, Real};

#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels x (in_channels * kernel * kernel)`.
    pub weight: Param<T>,
}

/// The unfolded input, `K x (n * out_h * out_w)`.
#[derive(Debug)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    n: usize,
    in_h: usize,
    in_w: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        assert!(stride >= 1);
        let fan_in = in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: Param::kaiming(vec![out_channels, fan_in], fan_in, rng),
        }
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Batch4<T>) -> Vec<T> {
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let np = x.n * p;
        let k = self.kernel;
        let mut cols = vec![T::zero(); self.patch_rows() * np];
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * np..(row + 1) * np];
                    for s in 0..x.n {
                        let plane = &x.sample(s)[ci * x.h * x.w..(ci + 1) * x.h * x.w];
                        for oy in 0..oh {
                            let iy = clamp(
                                (oy * self.stride + ky) as isize - self.padding as isize,
                                x.h,
                            );
                            let src_row = &plane[iy * x.w..(iy + 1) * x.w];
                            let base = s * p + oy * ow;
                            for ox in 0..ow {
                                let ix = clamp(
                                    (ox * self.stride + kx) as isize - self.padding as isize,
                                    x.w,
                                );
                                dst[base + ox] = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Batch4<T>) -> (Batch4<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_channels, "conv input channels");
        let (oh, ow) = self.out_size(x.h, x.w);
        let p = oh * ow;
        let np = x.n * p;
        let cols = self.im2col(x);
        let mut flat = vec![T::zero(); self.out_channels * np];
        matmul(
            self.out_channels,
            self.patch_rows(),
            np,
            &self.weight.value,
            false,
            &cols,
            false,
            T::zero(),
            &mut flat,
        );
        let mut y = Batch4::zeros(x.n, self.out_channels, oh, ow);
        for co in 0..self.out_channels {
            for s in 0..x.n {
                y.data[(s * self.out_channels + co) * p..(s * self.out_channels + co + 1) * p]
                    .copy_from_slice(&flat[co * np + s * p..co * np + (s + 1) * p]);
            }
        }
        let cache = ConvCache {
            cols,
            n: x.n,
            in_h: x.h,
            in_w: x.w,
        };
        (y, cache)
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, dy: &Batch4<T>, cache: &ConvCache<T>) -> Batch4<T> {
        let (oh, ow) = self.out_size(cache.in_h, cache.in_w);
        let p = oh * ow;
        let np = cache.n * p;
        let kr = self.patch_rows();
        assert_eq!((dy.n, dy.c, dy.h, dy.w), (cache.n, self.out_channels, oh, ow));

        let mut dflat = vec![T::zero(); self.out_channels * np];
        for co in 0..self.out_channels {
            for s in 0..cache.n {
                dflat[co * np + s * p..co * np + (s + 1) * p].copy_from_slice(
                    &dy.data[(s * self.out_channels + co) * p..(s * self.out_channels + co + 1) * p],
                );
            }
        }
        matmul(
            self.out_channels,
            np,
            kr,
            &dflat,
            false,
            &cache.cols,
            true,
            T::one(),
            &mut self.weight.grad,
        );
        let mut dcols = vec![T::zero(); kr * np];
        matmul(
            kr,
            self.out_channels,
            np,
            &self.weight.value,
            true,
            &dflat,
            false,
            T::zero(),
            &mut dcols,
        );

        let mut dx = Batch4::zeros(cache.n, self.in_channels, cache.in_h, cache.in_w);
        let (h, w, k) = (cache.in_h, cache.in_w, self.kernel);
        let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        for ci in 0..self.in_channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dcols[row * np..(row + 1) * np];
                    for s in 0..cache.n {
                        let plane = &mut dx.sample_mut(s)[ci * h * w..(ci + 1) * h * w];
                        for oy in 0..oh {
                            let iy = clamp(
                                (oy * self.stride + ky) as isize - self.padding as isize,
                                h,
                            );
                            for ox in 0..ow {
                                let ix = clamp(
                                    (ox * self.stride + kx) as isize - self.padding as isize,
                                    w,
                                );
                                plane[iy * w + ix] += src[s * p + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for Conv2d<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
    }

    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        out.push(NamedTensor {
            name: format!("{prefix}.weight"),
            shape: self.weight.shape.clone(),
            data: self.weight.value.clone(),
        });
    }

    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String> {
        self.weight.value = lookup(&format!("{prefix}.weight"), &self.weight.shape)?;
        Ok(())
    }
}
