//! First-order optimizers over a [`ParamStore`].

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let g = &grads[id.index()];
                    for (p, d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *p -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for id in ids {
                    let k = id.index();
                    let g = grads[k].data();
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                        m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                        v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *p -= self.lr * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::vector(&[3.0, 4.0]), Tensor::vector(&[0.0])];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
        let mut small = vec![Tensor::vector(&[0.1])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.1]);
    }

    #[test]
    fn both_optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut store = ParamStore::new();
            let id = store.add("x", Tensor::vector(&[3.0, -2.0]));
            let mut opt = Optimizer::new(kind, 0.1, &store);
            for _ in 0..200 {
                let grad = store.get(id).map(|x| 2.0 * x);
                opt.step(&mut store, &[grad]);
            }
            assert!(store.get(id).sq_norm() < 1e-3, "{kind:?}");
        }
    }
}
