//! SGD with momentum, selective weight decay, and the warmup+cosine
//! learning-rate schedule.

use ndarray::ArrayD;

use crate::nn::{ParamEntry, ParamStore};
use crate::tensor::Scalar;

pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

pub struct Sgd<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    velocity: Vec<ArrayD<T>>,
    pub cfg: SgdConfig,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(store: &ParamStore<T>, cfg: SgdConfig) -> Self {
        let entries = store.entries();
        let velocity = entries
            .iter()
            .map(|e| ArrayD::zeros(e.tensor.data().raw_dim()))
            .collect();
        Sgd {
            entries,
            velocity,
            cfg,
        }
    }

    /// One update with the given learning rate; decay applies only to
    /// entries flagged for it (conv/linear weights).
    pub fn step(&mut self, lr: f64) {
        let mu = T::cast(self.cfg.momentum);
        let wd = T::cast(self.cfg.weight_decay);
        let lr_t = T::cast(lr);
        for (entry, vel) in self.entries.iter().zip(self.velocity.iter_mut()) {
            let Some(mut grad) = entry.tensor.grad() else {
                continue;
            };
            if entry.decay && self.cfg.weight_decay != 0.0 {
                let data = entry.tensor.value();
                grad.zip_mut_with(&data, |g, &w| *g = *g + w * wd);
            }
            vel.zip_mut_with(&grad, |v, &g| *v = *v * mu + g);
            entry.tensor.update_data(|d| {
                d.zip_mut_with(vel, |w, &v| *w = *w - lr_t * v);
            });
        }
    }

    pub fn zero_grads(&self) {
        for e in &self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Momentum buffers for checkpointing.
    pub fn state(&self) -> Vec<(String, ArrayD<T>)> {
        self.entries
            .iter()
            .zip(&self.velocity)
            .map(|(e, v)| (format!("sgd.velocity.{}", e.name), v.clone()))
            .collect()
    }

    pub fn load_state(&mut self, state: &[(String, ArrayD<T>)]) {
        for (name, arr) in state {
            if let Some(stripped) = name.strip_prefix("sgd.velocity.") {
                if let Some(pos) = self.entries.iter().position(|e| e.name == stripped) {
                    self.velocity[pos] = arr.clone();
                }
            }
        }
    }
}

/// Linear warmup to `lr`, then cosine decay to `lr * final_factor`.
pub fn lr_schedule(
    lr: f64,
    final_factor: f64,
    warmup_epochs: f64,
    total_epochs: f64,
    epoch_f: f64,
) -> f64 {
    if warmup_epochs > 0.0 && epoch_f < warmup_epochs {
        return lr * (epoch_f / warmup_epochs).max(1e-3);
    }
    let lr_final = lr * final_factor;
    let span = (total_epochs - warmup_epochs).max(1e-9);
    let t = ((epoch_f - warmup_epochs) / span).clamp(0.0, 1.0);
    lr_final + 0.5 * (lr - lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
}
