use crate::error::{OclipError, Result};

/// Initial learning rate of the reference-scale recipe.
pub const REFERENCE_LR_INIT: f64 = 1e-4;

/// Cosine decay from `lr_init` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(OclipError::Contract(
            "cosine_lr with total_steps == 0".into(),
        ));
    }
    if step > total_steps {
        return Err(OclipError::Contract(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}
