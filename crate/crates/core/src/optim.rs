//! Adam and global-norm gradient clipping.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Adam {
    pub fn new(dimension: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; dimension],
            v: vec![0.0; dimension],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Moves `params` against `grad` (descent).
    pub fn descend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step(params, grad, -1.0);
    }

    /// Moves `params` along `grad` (ascent).
    pub fn ascend(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step(params, grad, 1.0);
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], sign: f64) {
        assert_eq!(params.len(), self.m.len(), "Adam dimension mismatch");
        assert_eq!(grad.len(), self.m.len(), "Adam dimension mismatch");
        self.steps += 1;
        let k = i32::try_from(self.steps).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(k);
        let c2 = 1.0 - self.beta2.powi(k);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] += sign * self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = l2_norm(grad);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
    norm
}
