//! Adam optimizer over a flat `f32` parameter vector.

/// Adam with L2 weight decay folded into the gradient (the torch
/// `Adam(weight_decay=..)` convention, not AdamW).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f32, weight_decay: f32) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update step; `params` and `grads` must have the length given at
    /// construction.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + self.weight_decay * params[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimize (p0-3)^2 + (p1+2)^2; Adam should land near the optimum.
    #[test]
    fn converges_on_quadratic() {
        let mut p = vec![0.0f32, 0.0];
        let mut opt = Adam::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 3.0), 2.0 * (p[1] + 2.0)];
            opt.step(&mut p, &g);
        }
        assert!((p[0] - 3.0).abs() < 1e-3, "p0={}", p[0]);
        assert!((p[1] + 2.0).abs() < 1e-3, "p1={}", p[1]);
    }

    /// First step moves each coordinate by exactly lr (bias-corrected Adam
    /// with zero state): hand-derived update magnitude.
    #[test]
    fn first_step_magnitude_is_lr() {
        let mut p = vec![1.0f32];
        let mut opt = Adam::new(1, 0.01, 0.0);
        opt.step(&mut p, &[0.7]);
        // mhat = g, vhat = g^2 => delta = lr * g / (|g| + eps) ~= lr * sign(g)
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-5, "p={}", p[0]);
    }
}
