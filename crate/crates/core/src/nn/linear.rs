use rand::Rng;

use super::{matmul, Mat, Module, NamedTensor, Param, Real};

/// Fully connected layer, `y = x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    /// `out x in`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

#[derive(Debug)]
pub struct LinearCache<T> {
    input: Mat<T>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::uniform_fan_in(vec![out_features, in_features], in_features, rng),
            bias: Param::uniform_fan_in(vec![out_features], in_features, rng),
        }
    }

    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::filled(vec![out_features, in_features], T::zero()),
            bias: Param::filled(vec![out_features], T::zero()),
        }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        assert_eq!(x.cols, self.in_features, "linear input width");
        let mut y = Mat::zeros(x.rows, self.out_features);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        matmul(
            x.rows,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            T::one(),
            &mut y.data,
        );
        y
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LinearCache<T>) {
        (self.apply(x), LinearCache { input: x.clone() })
    }

    pub fn backward(&mut self, dy: &Mat<T>, cache: &LinearCache<T>) -> Mat<T> {
        let x = &cache.input;
        assert_eq!((dy.rows, dy.cols), (x.rows, self.out_features));
        matmul(
            self.out_features,
            x.rows,
            self.in_features,
            &dy.data,
            true,
            &x.data,
            false,
            T::one(),
            &mut self.weight.grad,
        );
        for r in 0..dy.rows {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        let mut dx = Mat::zeros(x.rows, self.in_features);
        matmul(
            x.rows,
            self.out_features,
            self.in_features,
            &dy.data,
            false,
            &self.weight.value,
            false,
            T::zero(),
            &mut dx.data,
        );
        dx
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }

    fn params<'a>(&'a self, out: &mut Vec<&'a Param<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    fn state(&self, prefix: &str, out: &mut Vec<NamedTensor<T>>) {
        for (name, p) in [("weight", &self.weight), ("bias", &self.bias)] {
            out.push(NamedTensor {
                name: format!("{prefix}.{name}"),
                shape: p.shape.clone(),
                data: p.value.clone(),
            });
        }
    }

    fn load_state(
        &mut self,
        prefix: &str,
        lookup: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>, String>,
    ) -> Result<(), String> {
        self.weight.value = lookup(&format!("{prefix}.weight"), &self.weight.shape)?;
        self.bias.value = lookup(&format!("{prefix}.bias"), &self.bias.shape)?;
        Ok(())
    }
}
