//! Adam with per-entry step counters and global-norm gradient clipping.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; zero turns AdamW into Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First/second moment accumulators. Each entry keeps its own step count so
/// that entries updated only occasionally get the right bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn first_moment(&self, i: usize) -> f64 {
        self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> f64 {
        self.v[i]
    }

    pub fn steps(&self, i: usize) -> u64 {
        self.t[i]
    }

    /// Advances entry `i` by one step and returns the updated parameter.
    pub fn step_entry(&mut self, i: usize, param: f64, grad: f64) -> f64 {
        let c = &self.config;
        self.t[i] += 1;
        self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad;
        self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad * grad;
        let t = self.t[i] as i32;
        let m_hat = self.m[i] / (1.0 - c.beta1.powi(t));
        let v_hat = self.v[i] / (1.0 - c.beta2.powi(t));
        let decayed = param - c.lr * c.weight_decay * param;
        decayed - c.lr * m_hat / (v_hat.sqrt() + c.eps)
    }

    /// Dense update of every entry.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.len());
        assert_eq!(grads.len(), self.len());
        for (i, (p, &g)) in params.iter_mut().zip(grads).enumerate() {
            *p = self.step_entry(i, *p, g);
        }
    }
}

pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so its L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}
