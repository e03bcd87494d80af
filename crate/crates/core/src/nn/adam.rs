use crate::nn::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected adaptive-moment optimizer. Moment buffers are created on
/// the first step to match the trainable parameters of the store.
#[derive(Debug, Clone)]
pub struct Adam<F = f32> {
    pub config: AdamConfig,
    step_count: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        assert!(config.lr > 0.0, "learning rate must be positive");
        Self { config, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "learning rate must be positive");
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update to every trainable parameter using its `grad`.
    pub fn step(&mut self, params: &mut ParamStore<F>) {
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(Tensor::zeros(p.value.shape().to_vec()));
                self.v.push(Tensor::zeros(p.value.shape().to_vec()));
            }
        }
        self.step_count += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            for ((w, g), (mi, vi)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let g = g.f64();
                let m_new = beta1 * mi.f64() + (1.0 - beta1) * g;
                let v_new = beta2 * vi.f64() + (1.0 - beta2) * g * g;
                *mi = F::of(m_new);
                *vi = F::of(v_new);
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
                *w = F::of(w.f64() - update);
            }
        }
    }
}
