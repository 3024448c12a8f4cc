//! Adam with bias correction.

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let scale = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= scale * self.m[i] / (self.v[i].sqrt() / bc2_sqrt + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimizes_quadratic() {
        // f(p) = 0.5 * sum (p - c)^2, gradient p - c.
        let target = [1.0f32, -2.0, 0.5];
        let mut p = vec![0.0f32; 3];
        let mut opt = AdamState::new(3);
        for _ in 0..3000 {
            let g: Vec<f32> = p.iter().zip(target.iter()).map(|(a, b)| a - b).collect();
            opt.update(&mut p, &g, 1e-2);
        }
        for (a, b) in p.iter().zip(target.iter()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction the first update has magnitude ~lr.
        let mut p = vec![0.0f32];
        let mut opt = AdamState::new(1);
        opt.update(&mut p, &[0.37], 1e-2);
        assert!((p[0] + 1e-2).abs() < 1e-6, "got {}", p[0]);
    }
}
