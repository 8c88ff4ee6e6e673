use crate::error::{Error, Result};

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn lr_schedule(step: usize, warmup: usize, total: usize, base_lr: f64) -> Result<f64> {
    if total < warmup {
        return Err(Error::Config(format!("total steps {total} < warmup steps {warmup}")));
    }
    if step > total {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total}")));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if total == warmup {
        return Ok(base_lr);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
