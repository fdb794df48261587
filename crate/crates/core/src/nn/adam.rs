use super::{Param, Scalar};

/// Adaptive-moment gradient descent over an ordered parameter list.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Starts a new update; call [`Adam::update`] once per parameter in a fixed order.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update<T: Scalar>(&mut self, slot: usize, param: &mut Param<T>) {
        if self.first.len() <= slot {
            self.first.resize(slot + 1, Vec::new());
            self.second.resize(slot + 1, Vec::new());
        }
        if self.first[slot].len() != param.len() {
            self.first[slot] = vec![0.0; param.len()];
            self.second[slot] = vec![0.0; param.len()];
        }
        let t = self.step.max(1) as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
        for i in 0..param.len() {
            let g = param.grad[i].to_f64().unwrap();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let delta = self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            param.value[i] = param.value[i] - T::from_f64(delta).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::zeros(&[2]);
        p.grad = vec![3.0, -0.5];
        let mut opt = Adam::new(0.01);
        opt.begin_step();
        opt.update(0, &mut p);
        assert!((p.value[0] + 0.01).abs() < 1e-9);
        assert!((p.value[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Param::<f64>::filled(&[1], 5.0);
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            p.grad[0] = 2.0 * (p.value[0] - 1.5);
            opt.begin_step();
            opt.update(0, &mut p);
        }
        assert!((p.value[0] - 1.5).abs() < 1e-2);
    }
}
