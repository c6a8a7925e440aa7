//! Adam optimiser and versioned checkpoint files.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{ParamStore, TensorRecord};
use crate::autodiff::Tensor;
use crate::config::ExperimentConfig;
use crate::error::{ReidError, Result};
use crate::fusion::{StreamWeights, UNIFORM_WEIGHTS};
use crate::memory::ViewMemory;

pub const CHECKPOINT_HEADER: &str = "vireid-checkpoint v1";

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: u64,
    pub m: Vec<TensorRecord>,
    pub v: Vec<TensorRecord>,
}

impl Adam {
    pub fn new(cfg: &ExperimentConfig, store: &ParamStore) -> Self {
        let zeros: Vec<TensorRecord> = store.ids().map(|id| TensorRecord::from(&Tensor::zeros(store.get(id).shape().to_vec()))).collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            steps: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(ReidError::Shape(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            let w = store.get_mut(id);
            for (((wi, gi), mi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(&mut m.data).zip(&mut v.data) {
                let gi = gi + self.weight_decay * *wi;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *wi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g = g.scale(s));
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: String,
    pub config_hash: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimisation steps.
    pub step: usize,
    pub classes: Vec<u32>,
    pub params: BTreeMap<String, TensorRecord>,
    pub optimizer: Adam,
    pub memory: Option<ViewMemory>,
    pub stream_weights: StreamWeights,
}

impl Checkpoint {
    pub fn new(cfg: &ExperimentConfig, classes: &[u32], store: &ParamStore, optimizer: &Adam) -> Self {
        Self {
            config: cfg.to_text(),
            config_hash: cfg.hash(),
            epoch: 0,
            step: 0,
            classes: classes.to_vec(),
            params: store.to_snapshot(),
            optimizer: optimizer.clone(),
            memory: None,
            stream_weights: UNIFORM_WEIGHTS,
        }
    }

    pub fn config(&self) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = self.config.parse()?;
        if cfg.hash() != self.config_hash {
            return Err(ReidError::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(cfg)
    }

    /// Serialised parameters alone.
    pub fn param_payload(&self) -> String {
        serde_json::to_string(&self.params).expect("parameters serialise")
    }

    pub fn to_text(&self) -> String {
        format!("{CHECKPOINT_HEADER}\n{}\n", serde_json::to_string(self).expect("checkpoint serialises"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let (head, body) = text.split_once('\n').ok_or_else(|| ReidError::Checkpoint("truncated checkpoint".into()))?;
        if head.trim_end() != CHECKPOINT_HEADER {
            return Err(ReidError::Checkpoint(format!("unsupported checkpoint header `{head}`")));
        }
        serde_json::from_str(body).map_err(|e| ReidError::Checkpoint(e.to_string()))
    }

    /// Write atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| ReidError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| ReidError::io(&tmp, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| ReidError::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| ReidError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ReidError::io(path, e))?;
        Self::parse(&text)
    }

    /// Copy the stored parameters into `store`.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        store.load_snapshot(&self.params).map_err(ReidError::Checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&ExperimentConfig::default(), &store);
        adam.step(&mut store, &[Tensor::new([2], vec![0.5, -3.0])], 0.1).unwrap();
        // bias-corrected first step is lr * sign(g) up to eps
        let w = store.get(id).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 0.0]), Tensor::new([1], vec![4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        let n: f64 = g.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        let mut h = vec![Tensor::new([1], vec![0.5])];
        clip_global_norm(&mut h, 1.0);
        assert_eq!(h[0].data(), &[0.5]);
    }

    #[test]
    fn save_load_save_keeps_parameter_bytes() {
        let mut store = ParamStore::new();
        store.add_normal("a", &[3, 4], 0.7, &mut derive_rng(1, "t", 0));
        store.add("b", Tensor::new([3], vec![0.1, 1.0 / 3.0, -2.5e-300]));
        let cfg = ExperimentConfig::default();
        let ck = Checkpoint::new(&cfg, &[1, 2], &store, &Adam::new(&cfg, &store));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.param_payload(), ck.param_payload());
        assert_eq!(back, ck);
        assert_eq!(back.config().unwrap(), cfg);
        assert!(Checkpoint::parse("garbage\n{}").is_err());
    }
}
