use std::collections::{BTreeMap, HashMap};

use crate::data_io::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with weight decay applied to the weights directly rather than
/// folded into the gradient. Only convolution kernels decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every path in `grads`.
    pub fn step(&mut self, ckpt: &mut Checkpoint, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let step_size = (lr / c1) as f32;
        let (b1f, b2f, eps) = (b1 as f32, b2 as f32, self.eps as f32);
        let inv_sqrt_c2 = (1.0 / c2.sqrt()) as f32;
        for (path, g) in grads {
            let param = ckpt.get_mut(path)?;
            if !param.kind.trainable() {
                return Err(Error::InvalidArgument(format!("{path} is not trainable")));
            }
            if param.value.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("{path}: gradient {} for {}", g.shape(), param.value.shape())));
            }
            let n = g.numel();
            let (m, v) = self.moments.entry(path.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if param.kind.decays() { (1.0 - lr * self.weight_decay) as f32 } else { 1.0 };
            for (((w, &gi), mi), vi) in param.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1f * *mi + (1.0 - b1f) * gi;
                *vi = b2f * *vi + (1.0 - b2f) * gi * gi;
                *w = *w * decay - step_size * *mi / (vi.sqrt() * inv_sqrt_c2 + eps);
            }
        }
        Ok(())
    }
}
