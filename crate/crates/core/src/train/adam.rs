//! Adam optimizer with checkpointable state.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::ParameterStore;
use crate::nn::model::Model;
use crate::nn::tensor::Tensor;

fn default_lr() -> f64 {
    0.001
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, value, lo, hi) in [
            ("lr", self.lr, 0.0, f64::INFINITY),
            ("beta1", self.beta1, -1.0, 1.0),
            ("beta2", self.beta2, -1.0, 1.0),
            ("eps", self.eps, 0.0, f64::INFINITY),
        ] {
            if !value.is_finite() || value <= lo || value >= hi {
                return Err(Error::Config(format!("bad optimizer setting {name}={value}")));
            }
        }
        // Betas may be 0 (plain RMS behavior) but never negative.
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(Error::Config("betas must be non-negative".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates per trainable parameter, keyed by the
/// parameter path.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every trainable parameter, in visit order:
    /// `m = b1 m + (1-b1) g`, `v = b2 v + (1-b2) g²`, then the
    /// bias-corrected `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, model: &mut Model<f32>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 / (1.0 - self.config.beta1.powi(t));
        let c2 = 1.0 / (1.0 - self.config.beta2.powi(t));
        let (lr, b1, b2, eps) = (
            self.config.lr as f32,
            self.config.beta1 as f32,
            self.config.beta2 as f32,
            self.config.eps as f32,
        );
        let (c1, c2) = (c1 as f32, c2 as f32);
        let moments = &mut self.moments;
        model.visit_params_mut(&mut |p| {
            if !p.trainable() {
                return;
            }
            let (m, v) = moments.entry(p.path().to_string()).or_insert_with(|| {
                (
                    Tensor::zeros(p.value.shape()),
                    Tensor::zeros(p.value.shape()),
                )
            });
            let md = m.data_mut();
            let vd = v.data_mut();
            let gd = p.grad.data();
            let pd = p.value.data_mut();
            for i in 0..pd.len() {
                let g = gd[i];
                md[i] = b1 * md[i] + (1.0 - b1) * g;
                vd[i] = b2 * vd[i] + (1.0 - b2) * g * g;
                let m_hat = md[i] * c1;
                let v_hat = vd[i] * c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }

    /// Copies the moment tensors into `store` under the `optim.` prefix.
    pub fn state_into(&self, store: &mut ParameterStore<f32>) {
        for (path, (m, v)) in &self.moments {
            store.insert(format!("optim.m.{path}"), m.clone());
            store.insert(format!("optim.v.{path}"), v.clone());
        }
    }

    /// Restores moments from `optim.`-prefixed tensors and the step counter
    /// from checkpoint metadata. Absent state (a checkpoint written before
    /// any step) leaves the optimizer fresh.
    pub fn load_state(&mut self, store: &ParameterStore<f32>, step: u64) {
        self.step = step;
        self.moments.clear();
        for path in store.paths() {
            if let Some(stem) = path.strip_prefix("optim.m.") {
                let m = store.get(path).expect("path came from the store").clone();
                let v_key = format!("optim.v.{stem}");
                if let Some(v) = store.get(&v_key) {
                    self.moments.insert(stem.to_string(), (m, v.clone()));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{BatchInput, Model, ModelSpec};
    use crate::train::loss::softmax_cross_entropy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_batch(spec: &ModelSpec) -> BatchInput<f32> {
        let n = spec.grid_n;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let grids = (0..spec.k())
            .map(|_| {
                let mut t = Tensor::zeros(&[2, 1, n, n, n]);
                for v in t.data_mut() {
                    if rng.random_bool(0.4) {
                        *v = 1.0;
                    }
                }
                t
            })
            .collect();
        BatchInput {
            grids,
            labels: vec![0, 1],
        }
    }

    #[test]
    fn first_step_moves_parameters_by_roughly_lr() {
        // With bias correction, the very first update is lr * g/|g| element
        // wise (up to eps), so every touched weight moves by almost exactly
        // the learning rate.
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let mut model = Model::<f32>::build(&spec, 2).unwrap();
        let before = model.export();
        let batch = toy_batch(&spec);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (logits, cache) = model.forward_train(&batch, true, &mut rng).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &batch.labels).unwrap();
        model.zero_grads();
        model.backward(&cache, &dlogits);

        let config = AdamConfig::default();
        let mut adam = Adam::new(config.clone());
        adam.step(&mut model);

        let mut checked = 0usize;
        model.visit_params(&mut |p| {
            if !p.trainable() {
                return;
            }
            let old = before.get(p.path()).unwrap();
            for (a, (b, g)) in old
                .data()
                .iter()
                .zip(p.value.data().iter().zip(p.grad.data()))
            {
                if g.abs() > 1e-4 {
                    let moved = (a - b).abs();
                    assert!(
                        (moved - config.lr as f32).abs() < 1e-4,
                        "{}: moved {moved}",
                        p.path()
                    );
                    checked += 1;
                }
            }
        });
        assert!(checked > 10, "only {checked} parameters moved measurably");
    }

    #[test]
    fn state_round_trip_preserves_training_trajectory() {
        let spec = ModelSpec::ms_dvs_reduced(&[0.1], 3);
        let batch = toy_batch(&spec);
        let run = |resume_at: Option<u64>| -> Vec<u32> {
            let mut model = Model::<f32>::build(&spec, 5).unwrap();
            let mut adam = Adam::new(AdamConfig::default());
            let mut saved: Option<(ParameterStore<f32>, u64)> = None;
            for it in 0..10u64 {
                if Some(it) == resume_at {
                    // Serialize and reload both model and optimizer.
                    let (store, step) = saved.clone().unwrap();
                    model = Model::<f32>::build(&spec, 99).unwrap();
                    model.import(&store).unwrap();
                    adam = Adam::new(AdamConfig::default());
                    adam.load_state(&store, step);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(it);
                let (logits, cache) = model.forward_train(&batch, true, &mut rng).unwrap();
                let (_, dlogits) = softmax_cross_entropy(&logits, &batch.labels).unwrap();
                model.zero_grads();
                model.backward(&cache, &dlogits);
                adam.step(&mut model);
                if it + 1 == 5 {
                    let mut store = model.export();
                    adam.state_into(&mut store);
                    saved = Some((store, adam.step_count()));
                }
            }
            let mut bits = Vec::new();
            model.visit_params(&mut |p| {
                bits.extend(p.value.data().iter().map(|v| v.to_bits()))
            });
            bits
        };
        let straight = run(None);
        let resumed = run(Some(5));
        assert_eq!(straight, resumed);
    }

    #[test]
    fn config_validation() {
        assert!(AdamConfig::default().validate().is_ok());
        let mut c = AdamConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = AdamConfig::default();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
        let mut c = AdamConfig::default();
        c.eps = -1.0;
        assert!(c.validate().is_err());
    }
}
