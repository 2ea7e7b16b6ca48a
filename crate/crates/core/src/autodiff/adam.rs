use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates and the step count.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.value().len()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update from the gradients currently in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.grad.data().iter().all(|&g| g == 0.0) && m.iter().all(|&x| x == 0.0) {
                continue;
            }
            let grad = p.grad.clone();
            let value = p.value_mut();
            for (((x, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn store_with(vals: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[1.0, -2.0]);
        let mut adam = Adam::new(&s, AdamConfig::default());
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + ε)
        let mut s = store_with(&[0.0, 0.0, 0.0]);
        s.iter_mut().next().unwrap().grad = Tensor::new(vec![3], vec![0.5, -3.0, 1e-2]).unwrap();
        let mut adam = Adam::new(&s, AdamConfig { lr: 0.01, ..AdamConfig::default() });
        adam.step(&mut s);
        let got = s.iter().next().unwrap().value().data().to_vec();
        for (x, g) in got.iter().zip([0.5f64, -3.0, 1e-2]) {
            let expect = -0.01 * g / (g.abs() + 1e-8);
            assert!((x - expect).abs() < 1e-12, "{x} vs {expect}");
        }
    }

    #[test]
    fn identical_runs_agree() {
        let run = || {
            let mut s = store_with(&[0.3, 0.7]);
            let mut adam = Adam::new(&s, AdamConfig::default());
            for i in 0..10 {
                let x = s.iter().next().unwrap().value().data().to_vec();
                s.iter_mut().next().unwrap().grad =
                    Tensor::new(vec![2], vec![2.0 * x[0] + i as f64, x[1].sin()]).unwrap();
                adam.step(&mut s);
            }
            let out = s.iter().next().unwrap().value().data().to_vec();
            out
        };
        assert_eq!(run(), run());
    }
}
