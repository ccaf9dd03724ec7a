use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain stochastic gradient descent with a fixed learning rate.
    #[default]
    Sgd,
    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    Adam,
}

/// First-order optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    clip: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip: Option<f64>, num_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self {
            kind,
            lr,
            clip,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Applies one update in place. The gradient is rescaled first when its
    /// L2 norm exceeds the clip threshold.
    pub fn step(&mut self, params: &mut [f64], grad: &mut [f64]) {
        if let Some(c) = self.clip {
            let n = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if n > c {
                grad.iter_mut().for_each(|g| *g *= c / n);
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad.iter()) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                self.steps += 1;
                let c1 = 1.0 - B1.powi(self.steps);
                let c2 = 1.0 - B2.powi(self.steps);
                for i in 0..params.len() {
                    self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
                    self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
                    params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
                }
            }
        }
    }
}
