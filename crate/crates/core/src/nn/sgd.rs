use super::{Param, Real};

/// SGD with heavy-ball momentum and L2 weight decay, in the PyTorch form:
/// `buf = mu * buf + (g + wd * w); w -= lr * buf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn step<T: Real>(&self, params: &mut [&mut Param<T>], lr: f64) {
        let mu = T::lit(self.momentum);
        let wd = T::lit(self.weight_decay);
        let lr = T::lit(lr);
        for p in params.iter_mut() {
            let Param {
                value,
                grad,
                momentum,
                ..
            } = &mut **p;
            for ((w, g), buf) in value.iter_mut().zip(grad.iter()).zip(momentum.iter_mut()) {
                let d = *g + wd * *w;
                *buf = mu * *buf + d;
                *w -= lr * *buf;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_follow_the_closed_form() {
        let sgd = Sgd {
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut p = Param::<f64>::new(vec![1], vec![1.0]);
        p.grad[0] = 2.0;
        sgd.step(&mut [&mut p], 0.1);
        assert!((p.value[0] - 0.8).abs() < 1e-12);
        // buf = 0.5 * 2 + 2 = 3
        sgd.step(&mut [&mut p], 0.1);
        assert!((p.value[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let sgd = Sgd {
            momentum: 0.0,
            weight_decay: 0.1,
        };
        let mut p = Param::<f64>::new(vec![1], vec![2.0]);
        sgd.step(&mut [&mut p], 1.0);
        assert!((p.value[0] - 1.8).abs() < 1e-12);
    }
}
