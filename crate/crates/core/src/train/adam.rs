//! Adam with the epoch-level decay schedule used for training.

pub const DEFAULT_LR: f64 = 1e-3;
/// Learning-rate factor applied when the epoch loss goes up.
pub const LR_DECAY: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected step against the gradient.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
        assert_eq!(params.len(), self.m.len(), "optimizer state has the wrong size");
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }

    pub fn decay(&mut self) {
        self.lr *= LR_DECAY;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut opt = Adam::new(1, 1e-3);
        let mut p = [0.5];
        opt.update(&mut p, &[1.0]);
        // m_hat = 1, v_hat = 1
        assert!((p[0] - (0.5 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut opt = Adam::new(3, 1e-3);
        let mut p = [1.0, -2.0, 3.0];
        for _ in 0..5 {
            opt.update(&mut p, &[0.0; 3]);
        }
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn parameters_update_independently() {
        let mut joint = Adam::new(2, 1e-2);
        let mut a = Adam::new(1, 1e-2);
        let mut b = Adam::new(1, 1e-2);
        let (mut p, mut pa, mut pb) = ([0.3, -0.7], [0.3], [-0.7]);
        for g in [[1.0, -3.0], [0.5, 2.0], [-0.2, 0.1]] {
            joint.update(&mut p, &g);
            a.update(&mut pa, &g[..1]);
            b.update(&mut pb, &g[1..]);
        }
        assert_eq!(p, [pa[0], pb[0]]);
    }
}
