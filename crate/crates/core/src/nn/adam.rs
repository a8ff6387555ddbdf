/// Adam with decoupled weight decay over a set of parameter slices.
///
/// Slices must be passed in the same order on every step; moment buffers are
/// laid out by running offset.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if self.m.len() != total {
            self.m = vec![0.0; total];
            self.v = vec![0.0; total];
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for (p, g) in params.iter_mut().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter/gradient length");
            for i in 0..p.len() {
                let j = offset + i;
                p[i] *= 1.0 - self.lr * self.weight_decay;
                self.m[j] = self.beta1 * self.m[j] + (1.0 - self.beta1) * g[i];
                self.v[j] = self.beta2 * self.v[j] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = self.m[j] / bc1;
                let v_hat = self.v[j] / bc2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            offset += p.len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = AdamW::new(0.15, 0.0);
        let mut p = vec![0.0, 1.0];
        opt.step(&mut [&mut p], &[&[2.0, -3.0]]);
        assert!((p[0] + 0.15).abs() < 1e-6);
        assert!((p[1] - 1.15).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut opt = AdamW::new(0.05, 0.0);
        let mut p = vec![3.0];
        for _ in 0..500 {
            let g = [2.0 * (p[0] - 1.0)];
            opt.step(&mut [&mut p], &[&g]);
        }
        assert!((p[0] - 1.0).abs() < 1e-2);
    }
}
