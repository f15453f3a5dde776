use super::config::{OptimizerConfig, OptimizerKind};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// First-order update rules over a [`ParamStore`]'s accumulated gradients.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, t: i32, m: Vec<Tensor>, v: Vec<Tensor> },
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Optimizer::Sgd { lr }
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer::Adam { lr, beta1, beta2, eps, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn from_config(c: &OptimizerConfig) -> Self {
        match c.kind {
            OptimizerKind::Sgd => Self::sgd(c.lr),
            OptimizerKind::Adam => Self::adam(c.lr, c.beta1, c.beta2, c.eps),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        match self {
            Optimizer::Sgd { lr } => {
                for e in store.entries_mut() {
                    for (w, g) in e.value.data_mut().iter_mut().zip(e.grad.data()) {
                        *w -= *lr * g;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, t, m, v } => {
                if m.is_empty() {
                    for e in store.entries() {
                        let (r, c) = e.value.shape();
                        m.push(Tensor::zeros(r, c));
                        v.push(Tensor::zeros(r, c));
                    }
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, e) in store.entries_mut().iter_mut().enumerate() {
                    let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
                    for (j, (w, &g)) in e.value.data_mut().iter_mut().zip(e.grad.data()).enumerate() {
                        mi[j] = *beta1 * mi[j] + (1.0 - *beta1) * g;
                        vi[j] = *beta2 * vi[j] + (1.0 - *beta2) * g * g;
                        *w -= *lr * (mi[j] / c1) / ((vi[j] / c2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        let f = max_norm / norm;
        for e in store.entries_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Session;

    #[test]
    fn sgd_step_on_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[1.0, -2.0])).unwrap();
        let mut s = Session::new(&store);
        let p = s.param(w);
        let sq = s.graph.mul(p, p).unwrap();
        let l = s.graph.sum(sq);
        s.backward(l).unwrap();
        let g = s.gradients();
        drop(s);
        store.accumulate(g);
        Optimizer::sgd(0.1).step(&mut store);
        assert_eq!(store.value(w).data(), &[1.0 - 0.1 * 2.0, -2.0 - 0.1 * -4.0]);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[3.0, -1.0])).unwrap();
        store.accumulate(vec![(w, Tensor::row(&[0.5, -20.0]))]);
        Optimizer::adam(0.01, 0.9, 0.999, 0.0).step(&mut store);
        let d = store.value(w).data();
        assert!((d[0] - 2.99).abs() < 1e-12 && (d[1] + 0.99).abs() < 1e-12);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::row(&[0.0, 0.0])).unwrap();
        store.accumulate(vec![(w, Tensor::row(&[3.0, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
    }
}
