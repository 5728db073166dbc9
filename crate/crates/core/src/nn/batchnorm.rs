//! Batch normalisation over `n x c x s` activations (`s = h*w` for feature
//! maps, `1` for vectors).

use super::{Module, NamedTensor, Param, Real};

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    /// `None` when the layer has no learnable scale/shift.
    pub affine: Option<(Param<T>, Param<T>)>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Debug)]
pub struct BatchNormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    n: usize,
    s: usize,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        Self {
            channels,
            affine: affine.then(|| {
                (
                    Param::filled(vec![channels], T::one()),
                    Param::filled(vec![channels], T::zero()),
                )
            }),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    fn scale_shift(&self, c: usize) -> (T, T) {
        match &self.affine {
            Some((g, b)) => (g.value[c], b.value[c]),
            None => (T::one(), T::zero()),
        }
    }

    /// Normalises with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &[T], n: usize, s: usize) -> (Vec<T>, BatchNormCache<T>) {
        let c = self.channels;
        assert_eq!(x.len(), n * c * s, "batchnorm input size");
        assert!(n * s > 1, "batch statistics need more than one value per channel");
        let count = T::from_usize(n * s).unwrap();
        let mut y = vec![T::zero(); x.len()];
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum = T::zero();
            for i in 0..n {
                for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    sum += v;
                }
            }
            let mean = sum / count;
            let mut sq = T::zero();
            for i in 0..n {
                for &v in &x[(i * c + ch) * s..(i * c + ch + 1) * s] {
                    sq += (v - mean) * (v - mean);
                }
            }
            let var = sq / count;
            let istd = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, b) = self.scale_shift(ch);
            for i in 0..n {
                let range = (i * c + ch) * s..(i * c + ch + 1) * s;
                for j in range {
                    let xh = (x[j] - mean) * istd;
                    xhat[j] = xh;
                    y[j] = g * xh + b;
                }
            }
            let unbiased = sq / T::from_usize(n * s - 1).unwrap();
            let m = self.momentum;
            self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * mean;
            self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * unbiased;
        }
        (y, BatchNormCache { xhat, inv_std, n, s })
    }

    pub fn forward_eval(&self, x: &[T], n: usize, s: usize) -> Vec<T> {
        let c = self.channels;
        assert_eq!(x.len(), n * c * s, "batchnorm input size");
        let mut y = vec![T::zero(); x.len()];
        for ch in 0..c {
            let istd = T::one() / (self.running_var[ch] + self.eps).sqrt();
            let mean = self.running_mean[ch];
            let (g, b) = self.scale_shift(ch);
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    y[j] = g * (x[j] - mean) * istd + b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &[T], cache: &BatchNormCache<T>) -> Vec<T> {
        let (c, n, s) = (self.channels, cache.n, cache.s);
        assert_eq!(dy.len(), n * c * s);
        let count = T::from_usize(n * s).unwrap();
        let mut dx = vec![T::zero(); dy.len()];
        for ch in 0..c {
            let (g, _) = self.scale_shift(ch);
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    sum_dy += dy[j];
                    sum_dy_xhat += dy[j] * cache.xhat[j];
                }
            }
            if let Some((gamma, beta)) = &mut self.affine {
                gamma.grad[ch] += sum_dy_xhat;
                beta.grad[ch] += sum_dy;
            }
            let k = g * cache.inv_std[ch] / count;
            for i in 0..n {
                for j in (i * c + ch) * s..(i * c + ch + 1) * s {
                    dx[j] = k * (count * dy[j] - sum_dy - cache.xhat[j] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

impl<T: Real> Module<T> for BatchNorm<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        if let Some((g, b)) = &mut self.affine {
            out.push(g);
            out.push(b);
        }
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        if let Some((g, b)) = &self.affine {
            out.push(g);
            out.push(b);
        }
    }

    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        if let Some((g, b)) = &self.affine {
            out.push(NamedTensor {
                name: format!("{prefix}.gamma"),
                shape: g.shape.clone(),
                data: g.value.clone(),
            });
            out.push(NamedTensor {
                name: format!("{prefix}.beta"),
                shape: b.shape.clone(),
                data: b.value.clone(),
            });
        }
        out.push(NamedTensor {
            name: format!("{prefix}.running_mean"),
            shape: vec![self.channels],
            data: self.running_mean.clone(),
        });
        out.push(NamedTensor {
            name: format!("{prefix}.running_var"),
            shape: vec![self.channels],
            data: self.running_var.clone(),
        });
    }

    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String> {
        let shape = [self.channels];
        if let Some((g, b)) = &mut self.affine {
            g.value = lookup(&format!("{prefix}.gamma"), &shape)?;
            b.value = lookup(&format!("{prefix}.beta"), &shape)?;
        }
        self.running_mean = lookup(&format!("{prefix}.running_mean"), &shape)?;
        self.running_var = lookup(&format!("{prefix}.running_var"), &shape)?;
        Ok(())
    }
}
