//! Adam with standard bias correction.

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)], cfg: AdamConfig) -> AdamState {
        AdamState {
            cfg,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &[&Matrix], cfg: AdamConfig) -> AdamState {
        let shapes: Vec<_> = params.iter().map(|p| p.shape()).collect();
        AdamState::new(&shapes, cfg)
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update. A `None` gradient is treated as exactly zero (the
    /// moments still decay).
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Option<&Matrix>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut *params[i];
            debug_assert_eq!(p.shape(), m.shape());
            match grads[i] {
                Some(g) => {
                    debug_assert_eq!(g.shape(), m.shape());
                    for k in 0..p.len() {
                        let gk = g.data()[k];
                        let mk = b1 * m.data()[k] + (1.0 - b1) * gk;
                        let vk = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                        m.data_mut()[k] = mk;
                        v.data_mut()[k] = vk;
                        let mhat = mk / bc1;
                        let vhat = vk / bc2;
                        p.data_mut()[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    }
                }
                None => {
                    for k in 0..p.len() {
                        let mk = b1 * m.data()[k];
                        let vk = b2 * v.data()[k];
                        m.data_mut()[k] = mk;
                        v.data_mut()[k] = vk;
                        let mhat = mk / bc1;
                        let vhat = vk / bc2;
                        p.data_mut()[k] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
                    }
                }
            }
        }
    }
}
