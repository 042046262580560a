use std::collections::BTreeMap;

use super::PipelineError;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub hyper: AdamWParams,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(hyper: AdamWParams) -> Self {
        Self {
            hyper,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` that has an entry in
    /// `grads`: `p ← p − lr·(m̂ / (√v̂ + ε) + λ·p)`.
    ///
    /// Nothing is modified when a gradient is non-finite or mis-sized.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Vec<f32>>,
        lr: f64,
    ) -> Result<(), PipelineError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| PipelineError::Optimizer(format!("no parameter named {name}")))?;
            if p.numel() != g.len() {
                return Err(PipelineError::Optimizer(format!(
                    "{name}: {} gradients for {} values",
                    g.len(),
                    p.numel()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(PipelineError::Optimizer(format!(
                    "non-finite gradient for {name}"
                )));
            }
        }
        self.step += 1;
        let AdamWParams {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = f64::from(g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let update =
                    (m[i] / c1) / ((v[i] / c2).sqrt() + eps) + weight_decay * f64::from(*x);
                *x = (f64::from(*x) - lr * update) as f32;
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_ratio` of `total` steps, then linear
/// decay to zero. `step` is 0-based.
pub fn scheduled_lr(base: f64, step: usize, total: usize, warmup_ratio: f64) -> f64 {
    let warmup = (warmup_ratio * total as f64).ceil() as usize;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        // the peak is the last warmup step (or step 0 without warmup)
        base * (total - step) as f64 / (total - warmup.max(1) + 1) as f64
    } else {
        base
    }
}
