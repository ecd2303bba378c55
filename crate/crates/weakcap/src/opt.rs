//! RMS-propagation gradient descent over any [`ParamSet`].

use crate::num::ParamSet;

/// RMSprop state: a running mean of squared gradients per parameter.
#[derive(Debug, Clone)]
pub struct RmsProp<P: ParamSet> {
    mean_sq: P,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl<P: ParamSet> RmsProp<P> {
    /// Fresh optimizer for parameters shaped like `proto`.
    pub fn new(proto: &P, learning_rate: f64) -> Self {
        RmsProp { mean_sq: proto.zeros_like(), learning_rate, decay: 0.9, epsilon: 1e-8 }
    }

    /// One update: `s <- decay*s + (1-decay)*g^2; p -= lr * g / (sqrt(s)+eps)`.
    pub fn step(&mut self, params: &mut P, grads: &P) {
        let gs = grads.tensors();
        let lr = self.learning_rate;
        let (decay, eps) = (self.decay, self.epsilon);
        for ((p, s), g) in params.tensors_mut().into_iter().zip(self.mean_sq.tensors_mut()).zip(gs)
        {
            for ((pv, sv), &gv) in p.data.iter_mut().zip(s.data.iter_mut()).zip(&g.data) {
                *sv = decay * *sv + (1.0 - decay) * gv * gv;
                *pv -= lr * gv / (sv.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::Tensor;

    #[derive(Clone)]
    struct One(Tensor);
    impl ParamSet for One {
        fn tensors(&self) -> Vec<&Tensor> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn rmsprop_descends_a_quadratic() {
        // min (x-3)^2; gradient 2(x-3).
        let mut p = One(Tensor::zeros(1, 1));
        let mut opt = RmsProp::new(&p, 0.05);
        for _ in 0..2000 {
            let g = One(Tensor::from_vec(1, 1, vec![2.0 * (p.0.data[0] - 3.0)]).unwrap());
            opt.step(&mut p, &g);
        }
        assert!((p.0.data[0] - 3.0).abs() < 1e-2, "got {}", p.0.data[0]);
    }
}
