//! Adam with bias correction. Parameters and moments are rounded to f32 after
//! every update so saved state reloads exactly.

use crate::params::{GradStore, ParamStore};
use crate::tensor::Mat;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, p)| Mat::zeros(p.rows(), p.cols())).collect();
        Adam {
            lr,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradStore) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let mk = (BETA1 * m[k] + (1.0 - BETA1) * g[k]) as f32 as f64;
                let vk = (BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k]) as f32 as f64;
                m[k] = mk;
                v[k] = vk;
                let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + EPSILON);
                p[k] = (p[k] - update) as f32 as f64;
            }
        }
    }
}
