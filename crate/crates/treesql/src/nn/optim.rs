//! AdamW with decoupled weight decay, plus the linear warmup/decay schedule.

use thiserror::Error;

use super::param::ParamStore;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("adamw_step called with no accumulated gradients")]
    MissingGradients,
}

/// One AdamW update over every parameter in the store. Gradients are left
/// untouched; call [`ParamStore::zero_grad`] before the next accumulation.
pub fn adamw_step(
    store: &mut ParamStore,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<(), OptimError> {
    if !store.has_grads() {
        return Err(OptimError::MissingGradients);
    }
    let (b1, b2) = betas;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        p.step_count += 1;
        let t = p.step_count as i32;
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        let n = p.tensor.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = b1 * p.moment1.data()[i] + (1.0 - b1) * g;
            let v = b2 * p.moment2.data()[i] + (1.0 - b2) * g * g;
            p.moment1.data_mut()[i] = m;
            p.moment2.data_mut()[i] = v;
            let m_hat = m / bias1;
            let v_hat = v / bias2;
            let w = p.tensor.data()[i];
            p.tensor.data_mut()[i] = w - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w);
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `peak_lr` over the first `warmup_ratio` fraction
/// of `total` steps, then linear decay back to 0 at `total`.
pub fn warmup_linear(step: usize, total: usize, warmup_ratio: f64, peak_lr: f64) -> f64 {
    assert!(step <= total, "step {step} beyond total {total}");
    if total == 0 {
        return 0.0;
    }
    let warm = warmup_ratio * total as f64;
    let s = step as f64;
    if s <= warm {
        if warm == 0.0 {
            peak_lr
        } else {
            peak_lr * s / warm
        }
    } else {
        peak_lr * (total as f64 - s) / (total as f64 - warm)
    }
}
