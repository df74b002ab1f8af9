/// Adaptive-moment optimizer over a flat parameter vector.
///
/// Weight decay is decoupled by default (`p ← p − lr·wd·p` applied alongside
/// the moment step); `coupled_decay` adds `wd·p` to the gradient instead.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub coupled_decay: bool,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            coupled_decay: false,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64, coupled: bool) -> Self {
        self.weight_decay = wd;
        self.coupled_decay = coupled;
        self
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let mut g = grads[i];
            if self.coupled_decay {
                g += self.weight_decay * params[i];
            } else {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![1.0];
        Adam::new(1, 0.01).step(&mut p, &[5.0]);
        assert!((p[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = vec![1.0, 2.0];
        Adam::new(2, 0.0)
            .with_weight_decay(0.5, false)
            .step(&mut p, &[1.0, 1.0]);
        assert_eq!(p, vec![1.0, 2.0]);
    }
}
