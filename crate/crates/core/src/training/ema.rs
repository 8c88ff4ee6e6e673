use crate::data_io::Checkpoint;
use crate::error::{Error, Result};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.9998;

/// Shadow copy of every model tensor, running statistics included.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: Checkpoint,
    pub momentum: f64,
}

impl EmaState {
    pub fn new(model: &Checkpoint, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("EMA momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            shadow: model.clone(),
            momentum,
        })
    }
}

/// Momentum ramp for short runs: `min(m, (1 + t) / (10 + t))` after `t`
/// completed updates, so early shadows are not dominated by the
/// initialisation.
pub fn warmup_momentum(m: f64, updates: u64) -> f64 {
    let t = updates as f64;
    m.min((1.0 + t) / (10.0 + t))
}

/// `shadow <- m * shadow + (1 - m) * current` over all tensors at once.
pub fn ema_update(state: &mut EmaState, current: &Checkpoint) -> Result<()> {
    let shadow_paths: Vec<&str> = state.shadow.paths().collect();
    let current_paths: Vec<&str> = current.paths().collect();
    if shadow_paths != current_paths {
        let missing: Vec<String> = current_paths
            .iter()
            .filter(|p| !state.shadow.contains(p))
            .chain(shadow_paths.iter().filter(|p| !current.contains(p)))
            .map(|p| p.to_string())
            .collect();
        return Err(Error::MissingPaths(missing));
    }
    for p in &shadow_paths {
        if state.shadow.get(p)?.value.shape() != current.get(p)?.value.shape() {
            return Err(Error::shape("ema_update", format!("{p} changed shape")));
        }
    }
    let m = state.momentum as f32;
    let k = (1.0 - state.momentum) as f32;
    for p in current_paths {
        let src = current.get(p)?.value.data();
        for (s, &c) in state.shadow.get_mut(p)?.value.data_mut().iter_mut().zip(src) {
            *s = m * *s + k * c;
        }
    }
    Ok(())
}
