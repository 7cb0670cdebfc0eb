//! Adaptive-moment optimizer and cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// AdamW-style: `p -= lr * wd * p`, applied outside the moment estimates.
    #[default]
    Decoupled,
    /// Classic L2: `g += wd * p` before the moment update.
    Coupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            decay_mode: WeightDecayMode::Decoupled,
        }
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with per-parameter state keyed by registry name.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    state: BTreeMap<String, Moments>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Names of every parameter the optimizer has touched.
    pub fn registered(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Advances the shared step counter. Call once per optimizer step, before
    /// the per-parameter [`Adam::update`] calls.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(param.len(), grad.len(), "gradient shape for {name}");
        assert!(self.t > 0, "begin_step must precede update");
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            decay_mode,
        } = self.config;
        let st = self.state.entry(name.to_owned()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..param.len() {
            let mut g = grad[i];
            if decay_mode == WeightDecayMode::Coupled {
                g += weight_decay * param[i];
            }
            st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
            st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            if decay_mode == WeightDecayMode::Decoupled {
                param[i] -= lr * weight_decay * param[i];
            }
            param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `lr(t) = floor + (base - floor) * (1 + cos(pi * t / total)) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineAnnealing {
    pub base_lr: f64,
    pub floor: f64,
    pub total_steps: usize,
}

impl CosineAnnealing {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let progress = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.floor + (self.base_lr - self.floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
