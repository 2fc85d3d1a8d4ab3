use std::collections::HashSet;

use crate::autograd::{Grads, Mat, ParamId, ParamStore};

/// Adam with bias correction. Parameters without a gradient in a step keep
/// their moments unchanged.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    frozen: HashSet<ParamId>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            frozen: HashSet::new(),
        }
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen.insert(id);
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            if self.frozen.contains(&id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            m.zip_mut_with(g, |m, g| *m = b1 * *m + (1.0 - b1) * g);
            let v = self.v[i].get_or_insert_with(|| Mat::zeros(g.dim()));
            v.zip_mut_with(g, |v, g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (m, v) = (self.m[i].as_ref().unwrap(), self.v[i].as_ref().unwrap());
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, m, v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
